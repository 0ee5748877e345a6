//! Gaussian kernels, smoothing of teacher outputs, and distillation losses.
//!
//! Convolutions are "same"-sized with mirror padding that excludes the edge
//! sample (`d c b | a b c d | c b a`). With unit-sum kernels this preserves
//! constant inputs exactly.

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_CLAMP;
use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::field::{Field2D, MaskLogits, ProbabilityMap};
use crate::geometry::BinaryMask;
use crate::prompt_encoder::PromptEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    pub k: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    pub k: usize,
    pub delta: f64,
    /// `k x k`, row-major.
    pub weights: Vec<f64>,
}

impl Kernel2D {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.k + c]
    }
}

fn check_kernel_args(k: usize, sd: f64) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::EvenKernel(k));
    }
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::NonPositiveSigma(sd));
    }
    Ok(())
}

pub fn gaussian_kernel_1d(k: usize, sigma: f64) -> Result<Kernel1D> {
    check_kernel_args(k, sigma)?;
    let c = (k - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(Kernel1D {
        k,
        sigma,
        weights: raw.iter().map(|w| w / s).collect(),
    })
}

pub fn gaussian_kernel_2d(k: usize, delta: f64) -> Result<Kernel2D> {
    check_kernel_args(k, delta)?;
    let c = (k - 1) as f64 / 2.0;
    let mut raw = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let (du, dv) = (i as f64 - c, j as f64 - c);
            raw.push((-(du * du + dv * dv) / (2.0 * delta * delta)).exp());
        }
    }
    let s: f64 = raw.iter().sum();
    Ok(Kernel2D {
        k,
        delta,
        weights: raw.iter().map(|w| w / s).collect(),
    })
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

fn convolve_1d(x: &[f64], kern: &Kernel1D) -> Result<Vec<f64>> {
    if kern.k > x.len() {
        return Err(Error::KernelLargerThanInput {
            kernel: kern.k,
            input: x.len(),
        });
    }
    let r = (kern.k / 2) as isize;
    Ok((0..x.len() as isize)
        .map(|i| {
            kern.weights
                .iter()
                .enumerate()
                .map(|(t, w)| w * x[mirror(i + t as isize - r, x.len())])
                .sum()
        })
        .collect())
}

/// Smooths an embedding along its length. With `per_block` the cosine and sine
/// halves are convolved independently.
pub fn smooth_embedding(e: &[f64], kern: &Kernel1D, per_block: bool) -> Result<Vec<f64>> {
    if per_block {
        let half = e.len() / 2;
        let mut out = convolve_1d(&e[..half], kern)?;
        out.extend(convolve_1d(&e[half..], kern)?);
        Ok(out)
    } else {
        convolve_1d(e, kern)
    }
}

/// Same-size 2D convolution of a field with mirror padding.
pub fn convolve_2d(f: &Field2D, kern: &Kernel2D) -> Result<Field2D> {
    let small = f.height.min(f.width);
    if kern.k > small {
        return Err(Error::KernelLargerThanInput {
            kernel: kern.k,
            input: small,
        });
    }
    let r = (kern.k / 2) as isize;
    let mut out = vec![0.0; f.values.len()];
    for y in 0..f.height {
        for x in 0..f.width {
            let mut acc = 0.0;
            for u in 0..kern.k {
                let yy = mirror(y as isize + u as isize - r, f.height);
                for v in 0..kern.k {
                    let xx = mirror(x as isize + v as isize - r, f.width);
                    acc += kern.at(u, v) * f.values[yy * f.width + xx];
                }
            }
            out[y * f.width + x] = acc;
        }
    }
    Field2D::new(f.height, f.width, out)
}

/// `sigmoid(logits)` convolved with the 2D kernel.
pub fn smooth_mask(logits: &MaskLogits, kern: &Kernel2D) -> Result<ProbabilityMap> {
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask logits".into()));
    }
    convolve_2d(&logits.sigmoid(), kern)
}

/// Spatially varying label smoothing: the kernel applied to a hard label map.
pub fn svls_smooth(gt: &BinaryMask, kern: &Kernel2D) -> Result<ProbabilityMap> {
    convolve_2d(&Field2D::from_mask(gt), kern)
}

/// Uniform label smoothing towards 0.5 (two classes).
pub fn uls_smooth(target: &ProbabilityMap, epsilon: f64) -> ProbabilityMap {
    Field2D {
        height: target.height,
        width: target.width,
        values: target
            .values
            .iter()
            .map(|t| (1.0 - epsilon) * t + epsilon * 0.5)
            .collect(),
    }
}

/// `sum over tokens of (1/2l) ||teacher - student||^2`.
pub fn prompt_distill_loss(teacher: &PromptEmbedding, student: &PromptEmbedding) -> Result<f64> {
    let pairs = [
        (&teacher.e_phi1, &student.e_phi1),
        (&teacher.e_phi2, &student.e_phi2),
        (&teacher.e_theta, &student.e_theta),
    ];
    let mut total = 0.0;
    for (t, s) in pairs {
        if t.len() != s.len() || t.is_empty() {
            return Err(Error::DimMismatch(format!(
                "prompt tokens of width {} vs {}",
                t.len(),
                s.len()
            )));
        }
        let sq: f64 = t.iter().zip(s.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / t.len() as f64;
    }
    Ok(total)
}

/// Mean BCE of `sigmoid(student_logits)` (clamped) against a soft target.
pub fn mask_distill_loss(target: &ProbabilityMap, student_logits: &MaskLogits) -> Result<f64> {
    target.same_dims(student_logits)?;
    let n = target.values.len() as f64;
    let s: f64 = target
        .values
        .iter()
        .zip(&student_logits.values)
        .map(|(&t, &z)| {
            let p = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n)
}

pub fn total_distill_loss(prompt_loss: f64, mask_loss: f64, cfg: &DistillConfig) -> f64 {
    cfg.lambda * prompt_loss + (1.0 - cfg.lambda) * mask_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SmoothingMode {
    None,
    Uls,
    Svls,
    Gs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetMode {
    Gt,
    Teacher,
    TeacherPlusGt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub k1: usize,
    pub sigma: f64,
    pub k2: usize,
    pub delta: f64,
    pub smoothing_mode: SmoothingMode,
    pub target_mode: TargetMode,
    pub uls_epsilon: f64,
    /// Weight of the GT labels when mixing with teacher outputs.
    pub mix_weight: f64,
    /// Include the prompt-embedding term; off means mask-only distillation.
    pub prompt_distill: bool,
    /// Smooth the cosine and sine halves of a token separately.
    pub per_block_smoothing: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            k1: 5,
            sigma: 0.3,
            k2: 5,
            delta: 1.0,
            smoothing_mode: SmoothingMode::Gs,
            target_mode: TargetMode::Teacher,
            uls_epsilon: 0.1,
            mix_weight: 0.1,
            prompt_distill: true,
            per_block_smoothing: false,
        }
    }
}

/// Learning-target and smoothing combinations compared in the distillation
/// ablation, in report order.
pub const TARGET_PRESETS: [&str; 7] = ["GT+ULS", "GT+GS", "T+GT", "T", "T+ULS", "T+GS-", "T+GS"];

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.uls_epsilon) {
            return Err(Error::InvalidConfig(format!(
                "uls_epsilon {} outside [0,1)",
                self.uls_epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::InvalidConfig(format!(
                "mix_weight {} outside [0,1]",
                self.mix_weight
            )));
        }
        check_kernel_args(self.k1, self.sigma)?;
        check_kernel_args(self.k2, self.delta)?;
        Ok(())
    }

    /// Applies one of [`TARGET_PRESETS`] on top of `self`'s kernel settings.
    pub fn with_preset(&self, preset: &str) -> Result<Self> {
        let (target_mode, smoothing_mode, prompt_distill) = match preset {
            "GT+ULS" => (TargetMode::Gt, SmoothingMode::Uls, false),
            "GT+GS" => (TargetMode::Gt, SmoothingMode::Svls, false),
            "T+GT" => (TargetMode::TeacherPlusGt, SmoothingMode::None, true),
            "T" => (TargetMode::Teacher, SmoothingMode::None, true),
            "T+ULS" => (TargetMode::Teacher, SmoothingMode::Uls, true),
            "T+GS-" => (TargetMode::Teacher, SmoothingMode::Gs, false),
            "T+GS" => (TargetMode::Teacher, SmoothingMode::Gs, true),
            other => {
                return Err(Error::InvalidConfig(format!("unknown target preset {other:?}")))
            }
        };
        Ok(Self {
            target_mode,
            smoothing_mode,
            prompt_distill,
            ..self.clone()
        })
    }

    pub fn uses_teacher(&self) -> bool {
        self.target_mode != TargetMode::Gt
    }

    /// Effective prompt weight: zero when no prompt target exists.
    pub fn prompt_weight(&self) -> f64 {
        if self.uses_teacher() && self.prompt_distill {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn kernel_1d(&self) -> Result<Kernel1D> {
        gaussian_kernel_1d(self.k1, self.sigma)
    }

    pub fn kernel_2d(&self) -> Result<Kernel2D> {
        gaussian_kernel_2d(self.k2, self.delta)
    }

    /// Mask supervision target for the student.
    pub fn mask_target(
        &self,
        teacher_logits: Option<&MaskLogits>,
        gt: Option<&BinaryMask>,
    ) -> Result<ProbabilityMap> {
        let need_teacher = || {
            teacher_logits.ok_or_else(|| Error::InvalidConfig("teacher output required".into()))
        };
        let need_gt = || gt.ok_or_else(|| Error::InvalidConfig("GT mask required".into()));
        if self.target_mode == TargetMode::Teacher && self.smoothing_mode == SmoothingMode::Gs {
            return smooth_mask(need_teacher()?, &self.kernel_2d()?);
        }
        let base = match self.target_mode {
            TargetMode::Gt => Field2D::from_mask(need_gt()?),
            TargetMode::Teacher => need_teacher()?.sigmoid(),
            TargetMode::TeacherPlusGt => {
                let t = need_teacher()?.sigmoid();
                let g = Field2D::from_mask(need_gt()?);
                t.same_dims(&g)?;
                let w = self.mix_weight;
                Field2D {
                    values: t
                        .values
                        .iter()
                        .zip(&g.values)
                        .map(|(a, b)| (1.0 - w) * a + w * b)
                        .collect(),
                    ..t
                }
            }
        };
        match self.smoothing_mode {
            SmoothingMode::None => Ok(base),
            SmoothingMode::Uls => Ok(uls_smooth(&base, self.uls_epsilon)),
            SmoothingMode::Svls | SmoothingMode::Gs => convolve_2d(&base, &self.kernel_2d()?),
        }
    }

    /// Prompt-embedding target, if this configuration distills the prompt encoder.
    pub fn prompt_target(&self, teacher: &PromptEmbedding) -> Result<Option<PromptEmbedding>> {
        if !(self.uses_teacher() && self.prompt_distill) {
            return Ok(None);
        }
        if self.smoothing_mode != SmoothingMode::Gs {
            return Ok(Some(teacher.clone()));
        }
        let kern = self.kernel_1d()?;
        let pb = self.per_block_smoothing;
        Ok(Some(PromptEmbedding {
            e_phi1: smooth_embedding(&teacher.e_phi1, &kern, pb)?,
            e_phi2: smooth_embedding(&teacher.e_phi2, &kern, pb)?,
            e_theta: smooth_embedding(&teacher.e_theta, &kern, pb)?,
        }))
    }
}
