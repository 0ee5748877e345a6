//! JSON experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, DatasetSpec, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompt_encoder::AgpeConfig;
use crate::smoothing::DistillConfig;
use crate::train::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Draw pretraining scenes from an unbounded seeded stream.
    pub use_stream: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_scenes: 32,
            test_scenes: 32,
            min_instances: 1,
            max_instances: 4,
            use_stream: true,
        }
    }
}

impl DataConfig {
    fn split(&self, n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            scene: self.scene.clone(),
            n_scenes: n,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            seed,
        }
    }

    pub fn train_spec(&self, seed: u64) -> DatasetSpec {
        self.split(self.train_scenes, derive_seed(seed, 10))
    }

    pub fn test_spec(&self, seed: u64) -> DatasetSpec {
        self.split(self.test_scenes, derive_seed(seed, 11))
    }

    pub fn stream_spec(&self, seed: u64) -> Option<DatasetSpec> {
        self.use_stream.then(|| self.split(0, derive_seed(seed, 12)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Prompt encoder variants: GPE, AGPE, corner embeddings, orientation embedding.
    PromptEncoder,
    /// The seven distillation target modes.
    Targets,
    /// Gaussian smoothing grid over k, sigma and delta.
    Smoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub kind: AblationKind,
    pub seeds: Vec<u64>,
    /// Target presets; empty means all seven.
    pub modes: Vec<String>,
    pub kernel_sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            kind: AblationKind::Targets,
            seeds: vec![0],
            modes: Vec::new(),
            kernel_sizes: vec![3, 5, 7],
            sigmas: vec![0.3, 0.5],
            deltas: vec![0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub agpe: AgpeConfig,
    pub distill: DistillConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub ablation: Option<AblationConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            agpe: AgpeConfig::default(),
            distill: DistillConfig::default(),
            model: ModelConfig {
                student_init_from_teacher: true,
                ..ModelConfig::default()
            },
            data: DataConfig::default(),
            schedule: ScheduleConfig {
                teacher_pretrain_steps: 3000,
                student_encoder_steps: 5000,
                ..ScheduleConfig::default()
            },
            ablation: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.model.validate(&self.agpe)?;
        self.data.scene.validate()?;
        if self.data.min_instances > self.data.max_instances {
            return Err(Error::InvalidConfig("min_instances > max_instances".into()));
        }
        if !(self.schedule.lr > 0.0 && self.schedule.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.schedule.lr)));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copy with every seed-bearing field reseeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.agpe.seed = seed;
        c.schedule.seed = seed;
        c
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    pub fn train_set(&self) -> Result<Vec<Scene>> {
        self.data.train_spec(self.seed).generate()
    }

    pub fn test_set(&self) -> Result<Vec<Scene>> {
        self.data.test_spec(self.seed).generate()
    }

    pub fn stream(&self) -> Option<DatasetSpec> {
        self.data.stream_spec(self.seed)
    }
}
