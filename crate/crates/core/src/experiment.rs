//! End-to-end runs and the ablation sweeps over prompt-encoder variants,
//! distillation targets and smoothing parameters.

use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, AblationKind, ExperimentConfig};
use crate::data::{PerturbParams, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, mask_agreement, EvalResult, PromptSource};
use crate::model::{Model, Role};
use crate::prompt_encoder::EncodingMode;
use crate::smoothing::{DistillConfig, SmoothingMode, TARGET_PRESETS};
use crate::train::{distill_student, train_teacher, TrainState};

/// Seed of the prompt jitter used for robustness evaluation.
pub const PERTURB_SEED: u64 = 0x0bb;

pub fn default_perturbation() -> PerturbParams {
    PerturbParams::new(0.05, 0.05, 10.0)
}

pub fn run_teacher(cfg: &ExperimentConfig, train: &[Scene]) -> Result<TrainState> {
    let model = Model::init(&cfg.model, &cfg.agpe, Role::Teacher, cfg.seed)?;
    train_teacher(train, model, &cfg.schedule(), cfg.stream().as_ref())
}

pub fn run_student(cfg: &ExperimentConfig, teacher: &Model, train: &[Scene], distill: &DistillConfig) -> Result<TrainState> {
    distill_student(teacher, train, distill, &cfg.schedule(), cfg.stream().as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub gt_prompts: EvalResult,
    pub perturbed_prompts: EvalResult,
}

pub fn run_metrics(model: &Model, test: &[Scene], threads: usize) -> Result<RunMetrics> {
    let pert = PromptSource::Perturbed {
        params: default_perturbation(),
        seed: PERTURB_SEED,
    };
    Ok(RunMetrics {
        gt_prompts: evaluate_dataset(model, test, &PromptSource::GtObb, threads)?,
        perturbed_prompts: evaluate_dataset(model, test, &pert, threads)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    /// One result per seed, GT prompts on the held-out split.
    pub results: Vec<EvalResult>,
    /// Student/teacher mask agreement per seed.
    pub agreement: Vec<f64>,
    pub mean_ap: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    /// Teacher results per seed (one per variant for prompt-encoder sweeps).
    pub teachers: Vec<EvalResult>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct RowAcc {
    name: String,
    results: Vec<EvalResult>,
    agreement: Vec<f64>,
}

impl RowAcc {
    fn new(name: String) -> Self {
        Self {
            name,
            results: Vec::new(),
            agreement: Vec::new(),
        }
    }

    fn finish(self, seeds: &[u64]) -> AblationRow {
        AblationRow {
            mean_ap: mean(self.results.iter().map(|r| r.ap)),
            mean_ap50: mean(self.results.iter().map(|r| r.ap50)),
            mean_ap75: mean(self.results.iter().map(|r| r.ap75)),
            name: self.name,
            seeds: seeds.to_vec(),
            results: self.results,
            agreement: self.agreement,
        }
    }
}

/// Named prompt-encoder variants in row order.
pub fn prompt_encoder_variants() -> Vec<(&'static str, EncodingMode, bool, bool)> {
    vec![
        ("GPE", EncodingMode::Gpe, false, false),
        ("AGPE", EncodingMode::Agpe, false, false),
        ("AGPE+TCE+BCE", EncodingMode::Agpe, true, false),
        ("AGPE+TCE+BCE+OCE", EncodingMode::Agpe, true, true),
    ]
}

/// Named distillation configs for target or smoothing sweeps.
pub fn distill_variants(cfg: &ExperimentConfig, ab: &AblationConfig) -> Result<Vec<(String, DistillConfig)>> {
    match ab.kind {
        AblationKind::Targets => {
            let names: Vec<String> = if ab.modes.is_empty() {
                TARGET_PRESETS.iter().map(|s| s.to_string()).collect()
            } else {
                ab.modes.clone()
            };
            names
                .into_iter()
                .map(|n| {
                    let d = cfg.distill.with_preset(&n)?;
                    Ok((n, d))
                })
                .collect()
        }
        AblationKind::Smoothing => {
            let mut out = Vec::new();
            for &k in &ab.kernel_sizes {
                for &sigma in &ab.sigmas {
                    for &delta in &ab.deltas {
                        let d = DistillConfig {
                            k1: k,
                            k2: k,
                            sigma,
                            delta,
                            smoothing_mode: SmoothingMode::Gs,
                            ..cfg.distill.with_preset("T+GS")?
                        };
                        d.validate()?;
                        out.push((format!("k={k},sigma={sigma},delta={delta}"), d));
                    }
                }
            }
            Ok(out)
        }
        AblationKind::PromptEncoder => Err(Error::InvalidConfig("prompt-encoder sweeps have no distill variants".into())),
    }
}

/// Runs the sweep described by `cfg.ablation`. `progress` receives one line
/// per finished run.
pub fn run_ablation(cfg: &ExperimentConfig, threads: usize, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    let ab = cfg
        .ablation
        .clone()
        .ok_or_else(|| Error::InvalidConfig("config has no ablation section".into()))?;
    if ab.seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut teachers = Vec::new();
    let rows = match ab.kind {
        AblationKind::PromptEncoder => {
            let variants = prompt_encoder_variants();
            let mut acc: Vec<RowAcc> = variants.iter().map(|v| RowAcc::new(v.0.to_string())).collect();
            for &seed in &ab.seeds {
                for (i, &(name, mode, corners, orient)) in variants.iter().enumerate() {
                    let mut c = cfg.with_seed(seed);
                    c.agpe.mode = mode;
                    c.agpe.use_corner_embeddings = corners;
                    c.agpe.use_orientation_embedding = orient;
                    c.validate()?;
                    let (train, test) = (c.train_set()?, c.test_set()?);
                    let teacher = run_teacher(&c, &train)?;
                    teachers.push(evaluate_dataset(&teacher.model, &test, &PromptSource::GtObb, threads)?);
                    let student = run_student(&c, &teacher.model, &train, &c.distill)?;
                    let r = evaluate_dataset(&student.model, &test, &PromptSource::GtObb, threads)?;
                    acc[i].agreement.push(mask_agreement(&teacher.model, &student.model, &test, &PromptSource::GtObb, threads)?);
                    progress(&format!("seed {seed} {name}: ap50 {:.4} ap {:.4}", r.ap50, r.ap));
                    acc[i].results.push(r);
                }
            }
            acc.into_iter().map(|a| a.finish(&ab.seeds)).collect()
        }
        AblationKind::Targets | AblationKind::Smoothing => {
            let variants = distill_variants(cfg, &ab)?;
            let mut acc: Vec<RowAcc> = variants.iter().map(|v| RowAcc::new(v.0.clone())).collect();
            for &seed in &ab.seeds {
                let c = cfg.with_seed(seed);
                let (train, test) = (c.train_set()?, c.test_set()?);
                let teacher = run_teacher(&c, &train)?;
                let tr = evaluate_dataset(&teacher.model, &test, &PromptSource::GtObb, threads)?;
                progress(&format!("seed {seed} teacher: ap50 {:.4} ap {:.4}", tr.ap50, tr.ap));
                teachers.push(tr);
                for (i, (name, d)) in variants.iter().enumerate() {
                    let student = run_student(&c, &teacher.model, &train, d)?;
                    let r = evaluate_dataset(&student.model, &test, &PromptSource::GtObb, threads)?;
                    acc[i].agreement.push(mask_agreement(&teacher.model, &student.model, &test, &PromptSource::GtObb, threads)?);
                    progress(&format!("seed {seed} {name}: ap50 {:.4} ap {:.4}", r.ap50, r.ap));
                    acc[i].results.push(r);
                }
            }
            acc.into_iter().map(|a| a.finish(&ab.seeds)).collect()
        }
    };
    Ok(AblationReport {
        kind: ab.kind,
        seeds: ab.seeds,
        teachers,
        rows,
    })
}
