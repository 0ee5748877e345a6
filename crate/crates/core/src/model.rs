//! Toy image encoder and prompt-conditioned mask decoder.
//!
//! The image encoder is a per-patch MLP over `stride x stride` cells. The
//! decoder follows the two-way transformer layout: a learned mask token and
//! the three prompt tokens attend to each other and to the cell embeddings,
//! the cells attend back to the tokens, and the final mask token drives a
//! hypernetwork whose output is dotted with upsampled per-pixel features.
//!
//! Parameter names: `enc.*` image encoder, `prompt.*` prompt encoder,
//! `dec.*` decoder.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::field::{Field2D, MaskLogits};
use crate::geometry::{to_prompt_params, BinaryMask, OrientedBox};
use crate::params::{Binder, ParamStore};
use crate::prompt_encoder::{
    encode_graph, encode_params, init_encoder, AgpeConfig, EncoderParams, PromptEmbedding,
};

pub const ENC: &str = "enc.";
pub const PROMPT: &str = "prompt.";
pub const DEC: &str = "dec.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width; must equal `2l`.
    pub token_dim: usize,
    pub grid_stride: usize,
    /// Hidden widths of the patch MLP before the width multiplier.
    pub encoder_channels: Vec<usize>,
    pub decoder_blocks: usize,
    pub teacher_scale: usize,
    pub student_scale: usize,
    /// Attention inner width.
    pub attn_dim: usize,
    /// Per-pixel feature channels after upsampling.
    pub upsample_channels: usize,
    pub mlp_ratio: usize,
    /// Feed raw pixel intensity into the upsampled per-pixel features.
    pub pixel_skip: bool,
    /// Initialize the student prompt encoder and decoder from the teacher.
    pub student_init_from_teacher: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            grid_stride: 8,
            encoder_channels: vec![64],
            decoder_blocks: 2,
            teacher_scale: 2,
            student_scale: 1,
            attn_dim: 32,
            upsample_channels: 8,
            mlp_ratio: 2,
            pixel_skip: true,
            student_init_from_teacher: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, agpe: &AgpeConfig) -> Result<()> {
        if self.token_dim != agpe.token_dim() {
            return Err(Error::InvalidConfig(format!(
                "token_dim {} != 2l = {}",
                self.token_dim,
                agpe.token_dim()
            )));
        }
        if self.grid_stride == 0 || self.attn_dim == 0 || self.upsample_channels == 0 {
            return Err(Error::InvalidConfig("zero model width".into()));
        }
        if self.teacher_scale == 0 || self.student_scale == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("zero width multiplier".into()));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("zero encoder channel width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub agpe: AgpeConfig,
    pub role: Role,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let d = Normal::new(0.0, std).expect("valid std");
        Tensor::new(rows, cols, (0..rows * cols).map(|_| d.sample(&mut self.rng)).collect())
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

impl Model {
    /// Seeded initialization. The prompt encoder draws from `agpe.seed`, the
    /// rest from `seed`.
    pub fn init(config: &ModelConfig, agpe: &AgpeConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate(agpe)?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParamStore::new();
        let d = config.token_dim;
        let s2 = config.grid_stride * config.grid_stride;
        let scale = match role {
            Role::Teacher => config.teacher_scale,
            Role::Student => config.student_scale,
        };

        let mut fan_in = s2;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let width = c * scale;
            p.insert(format!("{ENC}w{i}"), init.linear(fan_in, width));
            p.insert(format!("{ENC}b{i}"), Tensor::zeros(1, width));
            fan_in = width;
        }
        p.insert(format!("{ENC}wf"), init.linear(fan_in, d));
        p.insert(format!("{ENC}bf"), Tensor::zeros(1, d));

        p.merge_prefixed(PROMPT, &init_encoder(agpe)?.to_store());

        let a = config.attn_dim;
        let cu = config.upsample_channels;
        p.insert(format!("{DEC}mask_token"), init.normal(1, d, 1.0));
        for b in 0..config.decoder_blocks {
            for part in ["self", "t2i", "i2t"] {
                let pre = format!("{DEC}b{b}.{part}.");
                p.insert(format!("{pre}wq"), init.linear(d, a));
                p.insert(format!("{pre}wk"), init.linear(d, a));
                p.insert(format!("{pre}wv"), init.linear(d, a));
                p.insert(format!("{pre}wo"), init.linear(a, d));
            }
            let hidden = d * config.mlp_ratio;
            let pre = format!("{DEC}b{b}.mlp.");
            p.insert(format!("{pre}w1"), init.linear(d, hidden));
            p.insert(format!("{pre}b1"), Tensor::zeros(1, hidden));
            p.insert(format!("{pre}w2"), init.linear(hidden, d));
            p.insert(format!("{pre}b2"), Tensor::zeros(1, d));
        }
        p.insert(format!("{DEC}up.w"), init.linear(d, s2 * cu));
        p.insert(format!("{DEC}up.b"), Tensor::zeros(1, s2 * cu));
        if config.pixel_skip {
            p.insert(format!("{DEC}pix.w"), init.normal(1, cu, 1.0));
        }
        p.insert(format!("{DEC}hyp.w1"), init.linear(d, d));
        p.insert(format!("{DEC}hyp.b1"), Tensor::zeros(1, d));
        p.insert(format!("{DEC}hyp.w2"), init.linear(d, cu));
        p.insert(format!("{DEC}hyp.b2"), Tensor::zeros(1, cu));
        p.insert(format!("{DEC}out_b"), Tensor::zeros(1, 1));

        Ok(Self {
            config: config.clone(),
            agpe: agpe.clone(),
            role,
            params: p,
        })
    }

    /// Parameters that are never trained.
    pub fn frozen(&self) -> BTreeSet<String> {
        self.agpe
            .frozen_names()
            .into_iter()
            .map(|n| format!("{PROMPT}{n}"))
            .collect()
    }

    /// `frozen()` plus every name starting with one of `prefixes`.
    pub fn frozen_with(&self, prefixes: &[&str]) -> BTreeSet<String> {
        let mut f = self.frozen();
        for name in self.params.names() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                f.insert(name.clone());
            }
        }
        f
    }

    pub fn all_names(&self) -> BTreeSet<String> {
        self.params.names().cloned().collect()
    }

    pub fn encoder_params(&self) -> Result<EncoderParams> {
        EncoderParams::from_store(&self.params.sub_store(PROMPT))
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.grid_stride;
        if image.height == 0 || image.width == 0 || image.height % s != 0 || image.width % s != 0 {
            return Err(Error::BadDims(image.height, image.width));
        }
        Ok(())
    }

    /// Cell embeddings, `(H/s * W/s) x token_dim`, cells in row-major order.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let frozen = self.all_names();
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &frozen);
        let x = image_graph(self, &mut g, &mut b, image)?;
        Ok(g.value(x).clone())
    }

    pub fn prompt_embedding(&self, obb: &OrientedBox, image_w: f64, image_h: f64) -> Result<PromptEmbedding> {
        encode_params(&to_prompt_params(obb, image_w, image_h)?, &self.encoder_params()?)
    }

    /// Mask logits for one prompt over precomputed cell embeddings.
    pub fn decode_mask(&self, emb: &Tensor, prompt: &PromptEmbedding, image: &Image) -> Result<MaskLogits> {
        self.check_image(image)?;
        let d = self.config.token_dim;
        let tokens = prompt.tokens();
        if tokens.cols != d {
            return Err(Error::DimMismatch(format!("token width {} vs {d}", tokens.cols)));
        }
        if emb.cols != d || emb.rows != self.grid_cells(image) {
            return Err(Error::DimMismatch(format!(
                "image embedding {}x{} vs {}x{d}",
                emb.rows,
                emb.cols,
                self.grid_cells(image)
            )));
        }
        let frozen = self.all_names();
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, &frozen);
        let x = g.constant(emb.clone());
        let t = g.constant(tokens);
        let logits = decode_graph(self, &mut g, &mut b, x, t, image)?;
        Field2D::new(image.height, image.width, g.value(logits).data.clone())
    }

    /// Mask logits for each box. Prompts are decoded independently.
    pub fn predict(&self, image: &Image, boxes: &[OrientedBox]) -> Result<Vec<MaskLogits>> {
        let emb = self.encode_image(image)?;
        boxes
            .iter()
            .map(|b| {
                let p = self.prompt_embedding(b, image.width as f64, image.height as f64)?;
                self.decode_mask(&emb, &p, image)
            })
            .collect()
    }

    fn grid_cells(&self, image: &Image) -> usize {
        let s = self.config.grid_stride;
        (image.height / s) * (image.width / s)
    }
}

fn patches(image: &Image, s: usize) -> Tensor {
    let (gh, gw) = (image.height / s, image.width / s);
    let mut data = Vec::with_capacity(image.values.len());
    for cy in 0..gh {
        for cx in 0..gw {
            for dy in 0..s {
                let row = (cy * s + dy) * image.width + cx * s;
                data.extend_from_slice(&image.values[row..row + s]);
            }
        }
    }
    Tensor::new(gh * gw, s * s, data)
}

/// Normalized cell centers as a `2 x N` matrix.
fn cell_centers(gh: usize, gw: usize) -> Tensor {
    let n = gh * gw;
    let mut data = vec![0.0; 2 * n];
    for cy in 0..gh {
        for cx in 0..gw {
            let i = cy * gw + cx;
            data[i] = (cx as f64 + 0.5) / gw as f64;
            data[n + i] = (cy as f64 + 0.5) / gh as f64;
        }
    }
    Tensor::new(2, n, data)
}

/// Index map from the `N x (s*s*c)` upsampling output to `HW x c` pixel rows.
fn shuffle_index(h: usize, w: usize, s: usize, c: usize) -> Vec<usize> {
    let gw = w / s;
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let cell = (r / s) * gw + col / s;
            let sub = (r % s) * s + col % s;
            let base = cell * s * s * c + sub * c;
            idx.extend(base..base + c);
        }
    }
    idx
}

pub fn image_graph(m: &Model, g: &mut Graph, b: &mut Binder, image: &Image) -> Result<Var> {
    m.check_image(image)?;
    let mut h = g.constant(patches(image, m.config.grid_stride));
    for i in 0..m.config.encoder_channels.len() {
        let w = b.var(g, &format!("{ENC}w{i}"))?;
        let bias = b.var(g, &format!("{ENC}b{i}"))?;
        let z = g.matmul(h, w);
        let z = g.add_row(z, bias);
        h = g.gelu(z);
    }
    let w = b.var(g, &format!("{ENC}wf"))?;
    let bias = b.var(g, &format!("{ENC}bf"))?;
    let z = g.matmul(h, w);
    Ok(g.add_row(z, bias))
}

pub fn tokens_graph(g: &mut Graph, b: &mut Binder, obb: &OrientedBox, image: &Image) -> Result<Var> {
    let p = to_prompt_params(obb, image.width as f64, image.height as f64)?;
    encode_graph(g, b, PROMPT, &p)
}

fn attention(g: &mut Graph, b: &mut Binder, pre: &str, q: Var, k: Var, v: Var) -> Result<Var> {
    let wq = b.var(g, &format!("{pre}wq"))?;
    let wk = b.var(g, &format!("{pre}wk"))?;
    let wv = b.var(g, &format!("{pre}wv"))?;
    let wo = b.var(g, &format!("{pre}wo"))?;
    let a = g.shape(wq).1;
    let q = g.matmul(q, wq);
    let k = g.matmul(k, wk);
    let v = g.matmul(v, wv);
    let s = g.matmul_bt(q, k);
    let s = g.scale(s, 1.0 / (a as f64).sqrt());
    let p = g.softmax_rows(s);
    let o = g.matmul(p, v);
    Ok(g.matmul(o, wo))
}

fn fourier_rows(g: &mut Graph, b: &mut Binder, group: &str, tau: Var) -> Result<Var> {
    let base = b.var(g, &format!("{PROMPT}base_{group}"))?;
    let scale = b.var(g, &format!("{PROMPT}scale_{group}"))?;
    let freq = g.mul_col(base, scale);
    let proj = g.matmul(freq, tau);
    let proj = g.transpose(proj);
    let proj = g.scale(proj, TAU);
    let c = g.cos(proj);
    let s = g.sin(proj);
    Ok(g.concat_cols(&[c, s]))
}

/// Dense positional encoding of the cell grid, built from the prompt encoder's
/// corner frequency sets so cell and corner features share a basis.
fn image_pe(g: &mut Graph, b: &mut Binder, gh: usize, gw: usize) -> Result<Var> {
    let tau = g.constant(cell_centers(gh, gw));
    let p1 = fourier_rows(g, b, "phi1", tau)?;
    let p2 = fourier_rows(g, b, "phi2", tau)?;
    Ok(g.add(p1, p2))
}

/// Logits (`HW x 1`) for one prompt.
pub fn decode_graph(m: &Model, g: &mut Graph, b: &mut Binder, x: Var, tokens: Var, image: &Image) -> Result<Var> {
    let cfg = &m.config;
    let s = cfg.grid_stride;
    let (gh, gw) = (image.height / s, image.width / s);
    let pe = image_pe(g, b, gh, gw)?;

    let mask_token = b.var(g, &format!("{DEC}mask_token"))?;
    let q0 = g.concat_rows(&[mask_token, tokens]);
    let mut q = q0;
    let mut x = x;
    for blk in 0..cfg.decoder_blocks {
        let pre = format!("{DEC}b{blk}.");
        let qp = g.add(q, q0);
        let a = attention(g, b, &format!("{pre}self."), qp, qp, q)?;
        let r = g.add(q, a);
        q = g.layer_norm_rows(r);

        let qp = g.add(q, q0);
        let kp = g.add(x, pe);
        let a = attention(g, b, &format!("{pre}t2i."), qp, kp, x)?;
        let r = g.add(q, a);
        q = g.layer_norm_rows(r);

        let w1 = b.var(g, &format!("{pre}mlp.w1"))?;
        let b1 = b.var(g, &format!("{pre}mlp.b1"))?;
        let w2 = b.var(g, &format!("{pre}mlp.w2"))?;
        let b2 = b.var(g, &format!("{pre}mlp.b2"))?;
        let h = g.matmul(q, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        let h = g.add_row(h, b2);
        let r = g.add(q, h);
        q = g.layer_norm_rows(r);

        let qp = g.add(q, q0);
        let kp = g.add(x, pe);
        let a = attention(g, b, &format!("{pre}i2t."), kp, qp, q)?;
        let r = g.add(x, a);
        x = g.layer_norm_rows(r);
    }

    let cu = cfg.upsample_channels;
    let wu = b.var(g, &format!("{DEC}up.w"))?;
    let bu = b.var(g, &format!("{DEC}up.b"))?;
    let y = g.matmul(x, wu);
    let y = g.add_row(y, bu);
    let hw = image.height * image.width;
    let idx = Rc::new(shuffle_index(image.height, image.width, s, cu));
    let mut u = g.gather(y, idx, hw, cu);
    if cfg.pixel_skip {
        let pix = g.constant(Tensor::new(hw, 1, image.values.clone()));
        let wp = b.var(g, &format!("{DEC}pix.w"))?;
        let sk = g.matmul(pix, wp);
        u = g.add(u, sk);
    }
    let u = g.gelu(u);

    let mt = g.slice_rows(q, 0, 1);
    let w1 = b.var(g, &format!("{DEC}hyp.w1"))?;
    let b1 = b.var(g, &format!("{DEC}hyp.b1"))?;
    let w2 = b.var(g, &format!("{DEC}hyp.w2"))?;
    let b2 = b.var(g, &format!("{DEC}hyp.b2"))?;
    let h = g.matmul(mt, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    let logits = g.matmul_bt(u, h);
    let ob = b.var(g, &format!("{DEC}out_b"))?;
    Ok(g.add_row(logits, ob))
}

/// `BCE(mean) + (1 - soft Dice)` in the graph.
pub fn supervised_loss_graph(g: &mut Graph, logits: Var, gt: &BinaryMask) -> Var {
    let t = Rc::new(gt.to_f64());
    let bce = g.bce_logits_mean(logits, t.clone());
    let dice = g.soft_dice_loss(logits, t);
    g.add(bce, dice)
}

/// `BCE(mean) + (1 - Dice(sigmoid(logits), gt))`; Dice uses a smoothing term of 1.
pub fn supervised_loss(logits: &MaskLogits, gt: &BinaryMask) -> Result<f64> {
    if (logits.height, logits.width) != (gt.height(), gt.width()) {
        return Err(Error::DimMismatch(format!(
            "logits {}x{} vs mask {}x{}",
            logits.height,
            logits.width,
            gt.height(),
            gt.width()
        )));
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(logits.values.len(), 1, logits.values.clone()));
    let l = supervised_loss_graph(&mut g, v, gt);
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::data::{generate_scene, SceneSpec};

    fn small() -> (ModelConfig, AgpeConfig) {
        (
            ModelConfig {
                token_dim: 16,
                encoder_channels: vec![8],
                attn_dim: 8,
                upsample_channels: 4,
                ..ModelConfig::default()
            },
            AgpeConfig {
                l: 8,
                ..AgpeConfig::default()
            },
        )
    }

    fn scene() -> crate::data::Scene {
        generate_scene(&SceneSpec {
            image_w: 32,
            image_h: 32,
            n_instances: 2,
            min_size: 8.0,
            max_size: 14.0,
            seed: 4,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn shapes() {
        let (mc, ac) = (ModelConfig::default(), AgpeConfig::default());
        let m = Model::init(&mc, &ac, Role::Teacher, 0).unwrap();
        let img = Field2D::filled(64, 64, 0.3);
        let emb = m.encode_image(&img).unwrap();
        assert_eq!(emb.shape(), (64, 64));
        assert_eq!(emb, m.encode_image(&img).unwrap());
        let p = m.prompt_embedding(&OrientedBox::new(20.0, 30.0, 16.0, 8.0, 0.3), 64.0, 64.0).unwrap();
        let out = m.decode_mask(&emb, &p, &img).unwrap();
        assert_eq!((out.height, out.width), (64, 64));
        assert!(out.values.iter().all(|v| v.is_finite()));
        assert!(matches!(m.encode_image(&Field2D::filled(60, 64, 0.0)), Err(Error::BadDims(..))));
    }

    #[test]
    fn zero_final_layer_gives_zero_embedding() {
        let (mc, ac) = small();
        let mut m = Model::init(&mc, &ac, Role::Student, 1).unwrap();
        for n in ["enc.wf", "enc.bf"] {
            m.params.get_mut(n).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let emb = m.encode_image(&Field2D::filled(32, 32, 0.0)).unwrap();
        assert!(emb.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_width_mismatch() {
        let (mc, ac) = small();
        let m = Model::init(&mc, &ac, Role::Student, 1).unwrap();
        let img = Field2D::filled(32, 32, 0.0);
        let emb = m.encode_image(&img).unwrap();
        let bad = PromptEmbedding {
            e_phi1: vec![0.0; 4],
            e_phi2: vec![0.0; 4],
            e_theta: vec![0.0; 4],
        };
        assert!(matches!(m.decode_mask(&emb, &bad, &img), Err(Error::DimMismatch(_))));
        let bad_cfg = ModelConfig { token_dim: 10, ..mc };
        assert!(Model::init(&bad_cfg, &ac, Role::Student, 0).is_err());
    }

    #[test]
    fn prompts_do_not_interact() {
        let (mc, ac) = small();
        let m = Model::init(&mc, &ac, Role::Teacher, 2).unwrap();
        let s = scene();
        let boxes: Vec<OrientedBox> = s.instances.iter().map(|i| i.gt_obb).collect();
        let both = m.predict(&s.image, &boxes).unwrap();
        let rev: Vec<OrientedBox> = boxes.iter().rev().copied().collect();
        let swapped = m.predict(&s.image, &rev).unwrap();
        assert_eq!(both[0], swapped[1]);
        assert_eq!(both[1], swapped[0]);
        let single = m.predict(&s.image, &boxes[1..]).unwrap();
        assert_eq!(single[0], both[1]);
        assert_ne!(both[0], both[1]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let idx = shuffle_index(4, 4, 2, 3);
        // pixel (1, 2): cell (0, 1), subpixel (1, 0), channel 0
        assert_eq!(idx[(1 * 4 + 2) * 3], 1 * 12 + 2 * 3);
        let p = patches(&Field2D::new(4, 4, (0..16).map(f64::from).collect()).unwrap(), 2);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn supervised_loss_cases() {
        let gt = BinaryMask::new(4, 4);
        let neg = Field2D::filled(4, 4, -60.0);
        assert!(supervised_loss(&neg, &gt).unwrap() < 1e-12);

        let half = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let zero = Field2D::filled(4, 4, 0.0);
        let dice = 1.0 - (2.0 * 4.0 + 1.0) / (8.0 + 8.0 + 1.0);
        let l = supervised_loss(&zero, &half).unwrap();
        assert!((l - 2f64.ln() - dice).abs() < 1e-12);
        assert!(supervised_loss(&zero, &BinaryMask::new(3, 4)).is_err());
    }

    #[test]
    fn supervised_loss_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = BinaryMask::from_fn(8, 8, |r, c| (r * 3 + c * 5) % 7 < 3);
        let z = Field2D::new(8, 8, (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let (mut bce, mut inter, mut sp, mut st) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..64 {
            let p = sigmoid(z.values[i]);
            let t = if gt.data()[i] { 1.0 } else { 0.0 };
            bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            inter += p * t;
            sp += p;
            st += t;
        }
        let oracle = bce / 64.0 + 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
        assert!((supervised_loss(&z, &gt).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn frozen_names_are_prefixed() {
        let (mc, ac) = small();
        let m = Model::init(&mc, &ac, Role::Teacher, 0).unwrap();
        let f = m.frozen();
        assert!(f.contains("prompt.base_phi1"));
        assert!(!f.contains("prompt.scale_phi1"));
        let f2 = m.frozen_with(&[ENC]);
        assert!(f2.contains("enc.wf"));
        for n in &f {
            assert!(m.params.contains(n), "{n}");
        }
    }

    #[test]
    fn teacher_is_wider() {
        let (mc, ac) = small();
        let t = Model::init(&mc, &ac, Role::Teacher, 0).unwrap();
        let s = Model::init(&mc, &ac, Role::Student, 0).unwrap();
        assert_eq!(t.params.get("enc.w0").unwrap().cols, 16);
        assert_eq!(s.params.get("enc.w0").unwrap().cols, 8);
        assert!(t.params.num_scalars() > s.params.num_scalars());
    }
}
