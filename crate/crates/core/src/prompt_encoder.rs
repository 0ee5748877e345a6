//! Oriented-box prompt encoder with adaptive Gaussian Fourier features.
//!
//! A box is reduced to three normalized 2-vectors (two corners and the
//! orientation pair). Each is mapped through random Fourier features
//! `[cos(2 pi G tau); sin(2 pi G tau)]` with its own frequency set
//! `G = diag(scale) * base`, where `base ~ N(0, 1)` is fixed by the seed and the
//! per-row `scale` is learned. A learned offset vector is added per token:
//! `omega1`/`omega2` for the corners, `omega_theta` for the orientation.
//!
//! Token layout is frozen as `[cos | sin]` within a token and
//! `[phi1; phi2; theta]` across tokens.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{to_prompt_params, OrientedBox, PromptParams};
use crate::params::{Binder, ParamStore};

/// Standard deviation of the learned offset embeddings at initialization.
pub const OMEGA_INIT_STD: f64 = 0.02;

/// Names of the serialized encoder tensors.
pub const TENSOR_NAMES: [&str; 9] = [
    "base_phi1",
    "base_phi2",
    "base_theta",
    "scale_phi1",
    "scale_phi2",
    "scale_theta",
    "omega1",
    "omega2",
    "omega_theta",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EncodingMode {
    /// Fixed frequency scales.
    #[serde(rename = "GPE")]
    Gpe,
    /// Learned frequency scales.
    #[serde(rename = "AGPE")]
    #[default]
    Agpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgpeConfig {
    /// Number of sampled frequencies per group; tokens are `2l` wide.
    pub l: usize,
    pub seed: u64,
    pub mode: EncodingMode,
    pub use_corner_embeddings: bool,
    pub use_orientation_embedding: bool,
    /// Learn the full frequency matrix instead of the per-row scales.
    pub learn_full_matrix: bool,
}

impl Default for AgpeConfig {
    fn default() -> Self {
        Self {
            l: 32,
            seed: 0,
            mode: EncodingMode::Agpe,
            use_corner_embeddings: true,
            use_orientation_embedding: true,
            learn_full_matrix: false,
        }
    }
}

impl AgpeConfig {
    pub fn token_dim(&self) -> usize {
        2 * self.l
    }

    /// Encoder tensor names that are not trained under this configuration.
    pub fn frozen_names(&self) -> BTreeSet<String> {
        let mut frozen = BTreeSet::new();
        for g in ["phi1", "phi2", "theta"] {
            if !self.learn_full_matrix {
                frozen.insert(format!("base_{g}"));
            }
            if self.mode == EncodingMode::Gpe || self.learn_full_matrix {
                frozen.insert(format!("scale_{g}"));
            }
        }
        if !self.use_corner_embeddings {
            frozen.insert("omega1".into());
            frozen.insert("omega2".into());
        }
        if !self.use_orientation_embedding {
            frozen.insert("omega_theta".into());
        }
        frozen
    }
}

/// One coordinate group's frequencies: `G = diag(scale) * base`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySet {
    /// `l x 2`
    pub base: Tensor,
    /// `l` row scales.
    pub scale: Vec<f64>,
}

impl FrequencySet {
    pub fn effective(&self) -> Tensor {
        let mut g = self.base.clone();
        for (row, &s) in g.data.chunks_mut(2).zip(&self.scale) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub freq_phi1: FrequencySet,
    pub freq_phi2: FrequencySet,
    pub freq_theta: FrequencySet,
    pub omega1: Vec<f64>,
    pub omega2: Vec<f64>,
    pub omega_theta: Vec<f64>,
}

impl EncoderParams {
    pub fn l(&self) -> usize {
        self.freq_phi1.scale.len()
    }

    pub fn to_store(&self) -> ParamStore {
        let l = self.l();
        let mut s = ParamStore::new();
        let groups = [
            ("phi1", &self.freq_phi1),
            ("phi2", &self.freq_phi2),
            ("theta", &self.freq_theta),
        ];
        for (name, f) in groups {
            s.insert(format!("base_{name}"), f.base.clone());
            s.insert(format!("scale_{name}"), Tensor::new(l, 1, f.scale.clone()));
        }
        s.insert("omega1", Tensor::row_vector(self.omega1.clone()));
        s.insert("omega2", Tensor::row_vector(self.omega2.clone()));
        s.insert("omega_theta", Tensor::row_vector(self.omega_theta.clone()));
        s
    }

    pub fn from_store(s: &ParamStore) -> Result<Self> {
        let freq = |name: &str| -> Result<FrequencySet> {
            let base = s.get(&format!("base_{name}"))?.clone();
            let scale = s.get(&format!("scale_{name}"))?.data.clone();
            if base.cols != 2 || base.rows != scale.len() {
                return Err(Error::DimMismatch(format!(
                    "frequency group {name}: base {:?}, {} scales",
                    base.shape(),
                    scale.len()
                )));
            }
            Ok(FrequencySet { base, scale })
        };
        let p = Self {
            freq_phi1: freq("phi1")?,
            freq_phi2: freq("phi2")?,
            freq_theta: freq("theta")?,
            omega1: s.get("omega1")?.data.clone(),
            omega2: s.get("omega2")?.data.clone(),
            omega_theta: s.get("omega_theta")?.data.clone(),
        };
        let l = p.l();
        let widths_ok = p.freq_phi2.scale.len() == l
            && p.freq_theta.scale.len() == l
            && [&p.omega1, &p.omega2, &p.omega_theta].iter().all(|o| o.len() == 2 * l);
        if !widths_ok {
            return Err(Error::DimMismatch("encoder tensors disagree on l".into()));
        }
        Ok(p)
    }
}

pub fn init_encoder(cfg: &AgpeConfig) -> Result<EncoderParams> {
    if cfg.l == 0 {
        return Err(Error::InvalidConfig("l must be at least 1".into()));
    }
    let l = cfg.l;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut base = || {
        let data: Vec<f64> = (0..2 * l).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(l, 2, data)
    };
    let (b1, b2, bt) = (base(), base(), base());
    let normal = Normal::new(0.0, OMEGA_INIT_STD).expect("valid std");
    let mut omega = |enabled: bool| -> Vec<f64> {
        let v: Vec<f64> = (0..2 * l).map(|_| normal.sample(&mut rng)).collect();
        if enabled {
            v
        } else {
            vec![0.0; 2 * l]
        }
    };
    let omega1 = omega(cfg.use_corner_embeddings);
    let omega2 = omega(cfg.use_corner_embeddings);
    let omega_theta = omega(cfg.use_orientation_embedding);
    let set = |base: Tensor| FrequencySet {
        base,
        scale: vec![1.0; l],
    };
    Ok(EncoderParams {
        freq_phi1: set(b1),
        freq_phi2: set(b2),
        freq_theta: set(bt),
        omega1,
        omega2,
        omega_theta,
    })
}

/// `[cos(2 pi G tau); sin(2 pi G tau)]` for an `l x 2` frequency matrix.
pub fn fourier_features(tau: [f64; 2], g: &Tensor) -> Result<Vec<f64>> {
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fourier input".into()));
    }
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("frequency matrix".into()));
    }
    if g.cols != 2 {
        return Err(Error::DimMismatch(format!("frequency matrix has {} cols", g.cols)));
    }
    let proj: Vec<f64> = g
        .data
        .chunks(2)
        .map(|r| TAU * (r[0] * tau[0] + r[1] * tau[1]))
        .collect();
    Ok(proj.iter().map(|p| p.cos()).chain(proj.iter().map(|p| p.sin())).collect())
}

fn add(a: Vec<f64>, b: &[f64]) -> Vec<f64> {
    a.into_iter().zip(b).map(|(x, y)| x + y).collect()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Returns `(E(phi1), E(phi2), E(phi_p))`, the last being the `4l` concatenation.
pub fn encode_position(
    p: &PromptParams,
    enc: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let e1 = add(fourier_features(p.phi1, &enc.freq_phi1.effective())?, &enc.omega1);
    let e2 = add(fourier_features(p.phi2, &enc.freq_phi2.effective())?, &enc.omega2);
    check_finite(&e1, "corner embedding")?;
    check_finite(&e2, "corner embedding")?;
    let ep = e1.iter().chain(&e2).copied().collect();
    Ok((e1, e2, ep))
}

pub fn encode_orientation(p: &PromptParams, enc: &EncoderParams) -> Result<Vec<f64>> {
    let e = add(
        fourier_features(p.theta_pair, &enc.freq_theta.effective())?,
        &enc.omega_theta,
    );
    check_finite(&e, "orientation embedding")?;
    Ok(e)
}

/// Encoded prompt: three `2l`-wide tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub e_phi1: Vec<f64>,
    pub e_phi2: Vec<f64>,
    pub e_theta: Vec<f64>,
}

impl PromptEmbedding {
    /// Flat `6l` vector `[E(phi1), E(phi2), E(theta)]`.
    pub fn p_obb(&self) -> Vec<f64> {
        self.e_phi1
            .iter()
            .chain(&self.e_phi2)
            .chain(&self.e_theta)
            .copied()
            .collect()
    }

    /// `3 x 2l` token view.
    pub fn tokens(&self) -> Tensor {
        Tensor::new(3, self.e_phi1.len(), self.p_obb())
    }

    pub fn from_tokens(t: &Tensor) -> Result<Self> {
        if t.rows != 3 {
            return Err(Error::DimMismatch(format!("expected 3 tokens, got {}", t.rows)));
        }
        Ok(Self {
            e_phi1: t.row(0).to_vec(),
            e_phi2: t.row(1).to_vec(),
            e_theta: t.row(2).to_vec(),
        })
    }
}

pub fn encode_params(p: &PromptParams, enc: &EncoderParams) -> Result<PromptEmbedding> {
    let (e_phi1, e_phi2, _) = encode_position(p, enc)?;
    let e_theta = encode_orientation(p, enc)?;
    Ok(PromptEmbedding {
        e_phi1,
        e_phi2,
        e_theta,
    })
}

pub fn encode_obb(
    b: &OrientedBox,
    image_w: f64,
    image_h: f64,
    enc: &EncoderParams,
) -> Result<PromptEmbedding> {
    let p = to_prompt_params(b, image_w, image_h)?;
    encode_params(&p, enc)
}

/// `||E(theta(-pi/2 + eps)) - E(theta(pi/2 - eps))||` for an otherwise fixed box.
/// Both angles describe nearly the same rectangle, so this measures the jump
/// the orientation encoding takes across the ends of the canonical range.
pub fn boundary_probe(enc: &EncoderParams, eps: f64) -> Result<f64> {
    let a = OrientedBox::new(32.0, 32.0, 20.0, 8.0, -FRAC_PI_2 + eps);
    let b = OrientedBox::new(32.0, 32.0, 20.0, 8.0, FRAC_PI_2 - eps);
    let ea = encode_orientation(&to_prompt_params(&a, 64.0, 64.0)?, enc)?;
    let eb = encode_orientation(&to_prompt_params(&b, 64.0, 64.0)?, enc)?;
    Ok(ea.iter().zip(&eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Differentiable encoding of one prompt; returns the `3 x 2l` token matrix.
/// Encoder tensors are looked up as `{prefix}{name}`.
pub fn encode_graph(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    p: &PromptParams,
) -> Result<Var> {
    let group = |g: &mut Graph, binder: &mut Binder, name: &str, omega: &str, tau: [f64; 2]| {
        let base = binder.var(g, &format!("{prefix}base_{name}"))?;
        let scale = binder.var(g, &format!("{prefix}scale_{name}"))?;
        let freq = g.mul_col(base, scale);
        let tau = g.constant(Tensor::new(2, 1, tau.to_vec()));
        let proj = g.matmul(freq, tau);
        let proj = g.transpose(proj);
        let proj = g.scale(proj, TAU);
        let c = g.cos(proj);
        let s = g.sin(proj);
        let feats = g.concat_cols(&[c, s]);
        let om = binder.var(g, &format!("{prefix}{omega}"))?;
        Ok::<Var, Error>(g.add(feats, om))
    };
    let e1 = group(g, binder, "phi1", "omega1", p.phi1)?;
    let e2 = group(g, binder, "phi2", "omega2", p.phi2)?;
    let et = group(g, binder, "theta", "omega_theta", p.theta_pair)?;
    Ok(g.concat_rows(&[e1, e2, et]))
}
