//! Teacher training, two-stage student distillation and gradient checking.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{derive_seed, generate_scene, DatasetSpec, Scene};
use crate::error::{Error, Result};
use crate::field::{Field2D, MaskLogits};
use crate::model::{
    decode_graph, image_graph, supervised_loss_graph, tokens_graph, Model, Role, DEC, ENC, PROMPT,
};
use crate::params::{Adam, Binder, ParamStore};
use crate::prompt_encoder::PromptEmbedding;
use crate::smoothing::{DistillConfig, TargetMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub teacher_epochs: usize,
    pub distill_epochs: usize,
    pub lr: f64,
    /// Steps on a stream of fresh scenes before the teacher is fine-tuned.
    pub teacher_pretrain_steps: usize,
    /// Embedding-matching steps for the student image encoder.
    pub student_encoder_steps: usize,
    /// Distillation steps on a stream of fresh scenes before the dataset epochs.
    pub student_pretrain_steps: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            teacher_epochs: 5,
            distill_epochs: 8,
            lr: 1e-3,
            teacher_pretrain_steps: 0,
            student_encoder_steps: 0,
            student_pretrain_steps: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    /// Mean loss per dataset epoch.
    pub loss_curve: Vec<f64>,
    /// Mean loss per block of pretraining or encoder-matching steps.
    pub aux_curve: Vec<f64>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, lr: f64, seed: u64) -> Self {
        Self {
            model,
            optimizer: Adam::new(lr),
            step: 0,
            loss_curve: Vec::new(),
            aux_curve: Vec::new(),
            seed,
        }
    }
}

const AUX_BLOCK: usize = 50;

fn check_loss(v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DivergenceDetected(step as usize))
    }
}

fn apply_step(state: &mut TrainState, frozen: &BTreeSet<String>, build: impl FnOnce(&mut Graph, &mut Binder) -> Result<Option<Var>>) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let store = state.model.params.clone();
    let mut b = Binder::new(&store, frozen);
    let Some(loss) = build(&mut g, &mut b)? else {
        return Ok(None);
    };
    let v = check_loss(g.scalar(loss), state.step)?;
    g.backward(loss);
    let grads = b.grads(&g);
    state.optimizer.update(&mut state.model.params, &grads)?;
    state.step += 1;
    if !state.model.params.all_finite() {
        return Err(Error::DivergenceDetected(state.step as usize));
    }
    Ok(Some(v))
}

/// Mean supervised loss over the scene's instances, or `None` for an empty scene.
pub fn scene_supervised_graph(m: &Model, g: &mut Graph, b: &mut Binder, scene: &Scene) -> Result<Option<Var>> {
    if scene.instances.is_empty() {
        return Ok(None);
    }
    let x = image_graph(m, g, b, &scene.image)?;
    let mut terms = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let t = tokens_graph(g, b, &inst.gt_obb, &scene.image)?;
        let logits = decode_graph(m, g, b, x, t, &scene.image)?;
        terms.push(supervised_loss_graph(g, logits, &inst.gt_mask));
    }
    let all = g.concat_rows(&terms);
    Ok(Some(g.mean(all)))
}

/// One optimizer step on the supervised loss of `scene`.
pub fn teacher_step(state: &mut TrainState, scene: &Scene) -> Result<Option<f64>> {
    let frozen = state.model.frozen();
    let model = state.model.clone();
    apply_step(state, &frozen, |g, b| scene_supervised_graph(&model, g, b, scene))
}

fn stream_scene(stream: &DatasetSpec, i: usize) -> Result<Scene> {
    generate_scene(&stream.scene_spec(i))
}

/// Supervised training: optional pretraining on a scene stream, then
/// `teacher_epochs` passes over `dataset` in seeded shuffled order.
pub fn train_teacher(
    dataset: &[Scene],
    model: Model,
    sched: &ScheduleConfig,
    stream: Option<&DatasetSpec>,
) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = TrainState::new(model, sched.lr, sched.seed);
    if let Some(stream) = stream {
        let mut block = Vec::new();
        for i in 0..sched.teacher_pretrain_steps {
            if let Some(l) = teacher_step(&mut state, &stream_scene(stream, i)?)? {
                block.push(l);
            }
            if block.len() == AUX_BLOCK || (i + 1 == sched.teacher_pretrain_steps && !block.is_empty()) {
                state.aux_curve.push(block.iter().sum::<f64>() / block.len() as f64);
                block.clear();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sched.seed, 0x7ea));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..sched.teacher_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for &i in &order {
            if let Some(l) = teacher_step(&mut state, &dataset[i])? {
                losses.push(l);
            }
        }
        if losses.is_empty() {
            return Err(Error::EmptyDataset);
        }
        state.loss_curve.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(state)
}

/// Fixed teacher outputs for one scene.
#[derive(Debug, Clone)]
pub struct SceneTargets {
    pub embedding: Tensor,
    pub logits: Vec<MaskLogits>,
    pub prompts: Vec<PromptEmbedding>,
}

pub fn teacher_targets(teacher: &Model, scene: &Scene) -> Result<SceneTargets> {
    let embedding = teacher.encode_image(&scene.image)?;
    let (w, h) = (scene.image.width as f64, scene.image.height as f64);
    let mut logits = Vec::new();
    let mut prompts = Vec::new();
    for inst in &scene.instances {
        let p = teacher.prompt_embedding(&inst.gt_obb, w, h)?;
        logits.push(teacher.decode_mask(&embedding, &p, &scene.image)?);
        prompts.push(p);
    }
    Ok(SceneTargets {
        embedding,
        logits,
        prompts,
    })
}

/// Per-instance distillation targets after smoothing.
struct InstanceTargets {
    mask: Rc<Vec<f64>>,
    prompt: Option<Rc<Vec<f64>>>,
}

fn instance_targets(cfg: &DistillConfig, t: &SceneTargets, scene: &Scene) -> Result<Vec<InstanceTargets>> {
    scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let teacher_logits = cfg.uses_teacher().then(|| &t.logits[i]);
            let gt = (cfg.target_mode != TargetMode::Teacher).then_some(&inst.gt_mask);
            let mask = cfg.mask_target(teacher_logits, gt)?;
            let prompt = cfg.prompt_target(&t.prompts[i])?.map(|p| Rc::new(p.p_obb()));
            Ok(InstanceTargets {
                mask: Rc::new(mask.values),
                prompt,
            })
        })
        .collect()
}

/// `lambda * L_prompt + (1 - lambda) * L_mask` averaged over instances, with the
/// two raw components. `x` is the student's cell embedding.
fn distill_graph(
    m: &Model,
    cfg: &DistillConfig,
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    scene: &Scene,
    targets: &[InstanceTargets],
) -> Result<Option<(Var, Var, Var)>> {
    if scene.instances.is_empty() {
        return Ok(None);
    }
    let l = m.agpe.l as f64;
    let lambda = cfg.prompt_weight();
    let (mut prompt_terms, mut mask_terms, mut totals) = (Vec::new(), Vec::new(), Vec::new());
    for (inst, tg) in scene.instances.iter().zip(targets) {
        let tokens = tokens_graph(g, b, &inst.gt_obb, &scene.image)?;
        let logits = decode_graph(m, g, b, x, tokens, &scene.image)?;
        let lm = g.clamped_bce_mean(logits, tg.mask.clone());
        let mw = g.scale(lm, 1.0 - cfg.lambda);
        let total = match &tg.prompt {
            Some(pt) => {
                let lp = g.sq_dist(tokens, pt.clone(), 1.0 / (2.0 * l));
                prompt_terms.push(lp);
                let pw = g.scale(lp, lambda);
                g.add(pw, mw)
            }
            None => mw,
        };
        mask_terms.push(lm);
        totals.push(total);
    }
    let mean = |g: &mut Graph, v: &[Var]| -> Var {
        if v.is_empty() {
            g.constant(Tensor::zeros(1, 1))
        } else {
            let c = g.concat_rows(v);
            g.mean(c)
        }
    };
    let lp = mean(g, &prompt_terms);
    let lm = mean(g, &mask_terms);
    let total = mean(g, &totals);
    Ok(Some((total, lp, lm)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub prompt: f64,
    pub mask: f64,
    pub total: f64,
}

/// Distillation loss of `student` on one scene without updating anything.
pub fn distill_loss(student: &Model, teacher: &SceneTargets, scene: &Scene, cfg: &DistillConfig) -> Result<Option<DistillLoss>> {
    let targets = instance_targets(cfg, teacher, scene)?;
    let frozen = student.all_names();
    let mut g = Graph::new();
    let mut b = Binder::new(&student.params, &frozen);
    let x = image_graph(student, &mut g, &mut b, &scene.image)?;
    Ok(distill_graph(student, cfg, &mut g, &mut b, x, scene, &targets)?.map(|(t, p, m)| DistillLoss {
        prompt: g.scalar(p),
        mask: g.scalar(m),
        total: g.scalar(t),
    }))
}

/// Fresh student. With `student_init_from_teacher` the prompt encoder and
/// decoder start as copies of the teacher's.
pub fn init_student(teacher: &Model, seed: u64) -> Result<Model> {
    let mut s = Model::init(&teacher.config, &teacher.agpe, Role::Student, derive_seed(seed, 1))?;
    if teacher.config.student_init_from_teacher {
        for (name, t) in teacher.params.iter() {
            if name.starts_with(PROMPT) || name.starts_with(DEC) {
                s.params.insert(name.clone(), t.clone());
            }
        }
    }
    Ok(s)
}

/// Stage 1: fit the student image encoder to the teacher's cell embeddings.
pub fn fit_student_encoder(
    state: &mut TrainState,
    teacher: &Model,
    scenes: &mut dyn FnMut(usize) -> Result<Scene>,
    steps: usize,
) -> Result<()> {
    let frozen = state.model.frozen_with(&[PROMPT, DEC]);
    let mut block = Vec::new();
    for i in 0..steps {
        let scene = scenes(i)?;
        let target = Rc::new(teacher.encode_image(&scene.image)?.data);
        let model = state.model.clone();
        let l = apply_step(state, &frozen, |g, b| {
            let x = image_graph(&model, g, b, &scene.image)?;
            let n = target.len() as f64;
            Ok(Some(g.sq_dist(x, target.clone(), 1.0 / n)))
        })?;
        block.extend(l);
        if block.len() == AUX_BLOCK || (i + 1 == steps && !block.is_empty()) {
            state.aux_curve.push(block.iter().sum::<f64>() / block.len() as f64);
            block.clear();
        }
    }
    Ok(())
}

/// Stage 2 step: prompt encoder and decoder on the distillation loss; the
/// image encoder is frozen.
fn distill_step(state: &mut TrainState, cfg: &DistillConfig, scene: &Scene, emb: &Tensor, targets: &[InstanceTargets]) -> Result<Option<f64>> {
    let frozen = state.model.frozen_with(&[ENC]);
    let model = state.model.clone();
    apply_step(state, &frozen, |g, b| {
        let x = g.constant(emb.clone());
        Ok(distill_graph(&model, cfg, g, b, x, scene, targets)?.map(|(t, _, _)| t))
    })
}

/// Two-stage distillation. Stage 1 fits the student encoder for
/// `student_encoder_steps` steps (on `stream` scenes if given, else cycling the
/// dataset); stage 2 runs `student_pretrain_steps` stream steps (if a stream is
/// given) and then `distill_epochs` passes, all with the encoder frozen.
pub fn distill_student(
    teacher: &Model,
    dataset: &[Scene],
    cfg: &DistillConfig,
    sched: &ScheduleConfig,
    stream: Option<&DatasetSpec>,
) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let student = init_student(teacher, sched.seed)?;
    let mut state = TrainState::new(student, sched.lr, sched.seed);
    let mut source = |i: usize| match stream {
        Some(s) => stream_scene(s, i),
        None => Ok(dataset[i % dataset.len()].clone()),
    };
    fit_student_encoder(&mut state, teacher, &mut source, sched.student_encoder_steps)?;
    state.optimizer = Adam::new(sched.lr);

    if let Some(stream) = stream {
        let mut block = Vec::new();
        for i in 0..sched.student_pretrain_steps {
            let scene = stream_scene(stream, i)?;
            let t = teacher_targets(teacher, &scene)?;
            let targets = instance_targets(cfg, &t, &scene)?;
            let emb = state.model.encode_image(&scene.image)?;
            block.extend(distill_step(&mut state, cfg, &scene, &emb, &targets)?);
            if block.len() == AUX_BLOCK || (i + 1 == sched.student_pretrain_steps && !block.is_empty()) {
                state.aux_curve.push(block.iter().sum::<f64>() / block.len() as f64);
                block.clear();
            }
        }
    }

    let mut cache = Vec::with_capacity(dataset.len());
    for scene in dataset {
        let t = teacher_targets(teacher, scene)?;
        let targets = instance_targets(cfg, &t, scene)?;
        let emb = state.model.encode_image(&scene.image)?;
        cache.push((emb, targets));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sched.seed, 0xd15));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..sched.distill_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for &i in &order {
            let (emb, targets) = &cache[i];
            if let Some(l) = distill_step(&mut state, cfg, &dataset[i], emb, targets)? {
                losses.push(l);
            }
        }
        if losses.is_empty() {
            return Err(Error::EmptyDataset);
        }
        state.loss_curve.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(state)
}

/// Floor on the denominator of the gradient-check relative error.
pub const GRAD_REL_FLOOR: f64 = 1e-6;
pub const GRAD_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

/// Objective for gradient checking: the supervised loss and/or the
/// distillation loss against a fixed teacher.
pub struct GradCheck<'a> {
    pub model: &'a Model,
    pub scene: &'a Scene,
    pub supervised: bool,
    pub teacher: Option<(&'a Model, DistillConfig)>,
}

fn objective_graph(
    gc: &GradCheck,
    g: &mut Graph,
    b: &mut Binder,
    targets: Option<&[InstanceTargets]>,
) -> Result<Var> {
    let m = gc.model;
    let x = image_graph(m, g, b, &gc.scene.image)?;
    let mut parts = Vec::new();
    if gc.supervised {
        for inst in &gc.scene.instances {
            let t = tokens_graph(g, b, &inst.gt_obb, &gc.scene.image)?;
            let logits = decode_graph(m, g, b, x, t, &gc.scene.image)?;
            parts.push(supervised_loss_graph(g, logits, &inst.gt_mask));
        }
    }
    if let (Some((_, cfg)), Some(tg)) = (&gc.teacher, targets) {
        if let Some((total, _, _)) = distill_graph(m, cfg, g, b, x, gc.scene, tg)? {
            parts.push(total);
        }
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::zeros(1, 1)));
    }
    let all = g.concat_rows(&parts);
    Ok(g.sum(all))
}

/// Central finite differences against the analytic gradient for
/// `probe_count` random trainable scalars. Probes pick a module (image
/// encoder, prompt encoder, decoder) uniformly, then a scalar within it.
pub fn gradient_check(gc: &GradCheck, probe_count: usize, seed: u64) -> Result<GradReport> {
    let m = gc.model;
    let targets = match &gc.teacher {
        Some((t, cfg)) => Some(instance_targets(cfg, &teacher_targets(t, gc.scene)?, gc.scene)?),
        None => None,
    };
    let frozen = m.frozen();
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, &frozen);
    let out = objective_graph(gc, &mut g, &mut b, targets.as_deref())?;
    g.backward(out);
    let grads: BTreeMap<String, Vec<f64>> = b.grads(&g);
    let max_abs_grad = grads
        .values()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));

    let mut modules: Vec<Vec<(&String, usize)>> = Vec::new();
    for prefix in [ENC, PROMPT, DEC] {
        let names: Vec<(&String, usize)> = grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n, v.len()))
            .collect();
        if !names.is_empty() {
            modules.push(names);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_frozen = m.all_names();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binder::new(store, &all_frozen);
        let v = objective_graph(gc, &mut g, &mut b, targets.as_deref())?;
        Ok(g.scalar(v))
    };
    let mut probes = Vec::with_capacity(probe_count);
    let mut store = m.params.clone();
    for _ in 0..probe_count {
        if modules.is_empty() {
            break;
        }
        let module = &modules[rng.gen_range(0..modules.len())];
        let total: usize = module.iter().map(|(_, n)| n).sum();
        let mut k = rng.gen_range(0..total);
        let mut pick = None;
        for (name, n) in module {
            if k < *n {
                pick = Some(((*name).clone(), k));
                break;
            }
            k -= n;
        }
        let (name, index) = pick.expect("index within module");
        let orig = store.get(&name)?.data[index];
        store.get_mut(&name)?.data[index] = orig + GRAD_FD_STEP;
        let up = eval(&store)?;
        store.get_mut(&name)?.data[index] = orig - GRAD_FD_STEP;
        let down = eval(&store)?;
        store.get_mut(&name)?.data[index] = orig;
        let numeric = (up - down) / (2.0 * GRAD_FD_STEP);
        let analytic = grads[&name][index];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        probes.push(GradProbe {
            name,
            index,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = probes.iter().fold(0.0f64, |a, p| a.max(p.rel_err));
    Ok(GradReport {
        probes,
        max_rel_err,
        max_abs_grad,
    })
}

/// Foreground probability maps for `boxes` over the scene image.
pub fn predict_probabilities(m: &Model, scene: &Scene, boxes: &[crate::geometry::OrientedBox]) -> Result<Vec<Field2D>> {
    Ok(m.predict(&scene.image, boxes)?.iter().map(Field2D::sigmoid).collect())
}
