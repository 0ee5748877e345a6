//! Seeded synthetic scenes of oriented instances and prompt perturbation.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::geometry::{canonicalize, min_area_obb_mask, rotated_iou, BinaryMask, OrientedBox};

/// Single-channel image with values in `[0, 1]`.
pub type Image = Field2D;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const MIN_INSTANCE_PIXELS: usize = 16;
const BACKGROUND_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    RotatedRectangle,
    Ellipse,
    Capsule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_w: usize,
    pub image_h: usize,
    pub n_instances: usize,
    pub shape_set: Vec<ShapeKind>,
    /// Maximum pairwise rotated IoU between GT boxes.
    pub overlap_cap: f64,
    pub noise_level: f64,
    /// Range of the long side of a shape, in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_w: 64,
            image_h: 64,
            n_instances: 2,
            shape_set: vec![ShapeKind::RotatedRectangle, ShapeKind::Ellipse, ShapeKind::Capsule],
            overlap_cap: 0.1,
            noise_level: 0.05,
            min_size: 12.0,
            max_size: 32.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 || self.image_w % 8 != 0 || self.image_h % 8 != 0 {
            return Err(Error::BadDims(self.image_h, self.image_w));
        }
        if !(0.0..1.0).contains(&self.overlap_cap) {
            return Err(Error::InvalidConfig(format!("overlap cap {} outside [0,1)", self.overlap_cap)));
        }
        if self.shape_set.is_empty() && self.n_instances > 0 {
            return Err(Error::InvalidConfig("empty shape set".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::InvalidConfig(format!(
                "size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidConfig("negative noise level".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub gt_mask: BinaryMask,
    pub gt_obb: OrientedBox,
    pub class_id: u32,
    pub shape: ShapeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

/// Shape parameters in the shape's own frame.
#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Half extents along the local axes.
    a: f64,
    b: f64,
    theta: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind {
            ShapeKind::RotatedRectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Capsule => {
                let half = self.a - self.b;
                let du = (u.abs() - half).max(0.0);
                du * du + v * v <= self.b * self.b
            }
        }
    }

    /// Radius of a disc around the center that contains the shape.
    fn radius(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    fn rasterize(&self, w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| self.contains(c as f64 + 0.5, r as f64 + 0.5))
    }
}

fn sample_shape(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Shape {
    let kind = spec.shape_set[rng.gen_range(0..spec.shape_set.len())];
    let long = rng.gen_range(spec.min_size..=spec.max_size);
    let short = long * rng.gen_range(0.4..0.9);
    let (a, b) = (long / 2.0, short / 2.0);
    let theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
    let r = (a * a + b * b).sqrt();
    let (w, h) = (spec.image_w as f64, spec.image_h as f64);
    let pad_x = r.min(w / 2.0);
    let pad_y = r.min(h / 2.0);
    Shape {
        kind,
        cx: rng.gen_range(pad_x..=w - pad_x),
        cy: rng.gen_range(pad_y..=h - pad_y),
        a,
        b,
        theta,
    }
}

/// Renders a scene. Instances never share pixels, their GT boxes respect the
/// overlap cap, and every instance lies fully inside the image.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.image_w, spec.image_h);
    let mut occupied = vec![false; w * h];
    let mut instances: Vec<Instance> = Vec::with_capacity(spec.n_instances);
    for _ in 0..spec.n_instances {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let shape = sample_shape(spec, &mut rng);
            if shape.cx - shape.radius() < 0.0
                || shape.cy - shape.radius() < 0.0
                || shape.cx + shape.radius() > w as f64
                || shape.cy + shape.radius() > h as f64
            {
                continue;
            }
            let mask = shape.rasterize(w, h);
            if mask.count() < MIN_INSTANCE_PIXELS {
                continue;
            }
            if mask.data().iter().zip(&occupied).any(|(&a, &b)| a && b) {
                continue;
            }
            let obb = min_area_obb_mask(&mask)?;
            let mut ok = true;
            for other in &instances {
                if rotated_iou(&obb, &other.gt_obb)? > spec.overlap_cap {
                    ok = false;
                    break;
                }
            }
            if ok {
                placed = Some((shape, mask, obb));
                break;
            }
        }
        let (shape, mask, obb) = placed.ok_or(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS))?;
        for (o, &m) in occupied.iter_mut().zip(mask.data()) {
            *o |= m;
        }
        instances.push(Instance {
            gt_mask: mask,
            gt_obb: obb,
            class_id: 0,
            shape: shape.kind,
        });
    }

    let noise = Normal::new(0.0, spec.noise_level.max(1e-300)).expect("valid std");
    let mut values = vec![BACKGROUND_LEVEL; w * h];
    for inst in &instances {
        let level = rng.gen_range(0.6..0.95);
        for (v, &m) in values.iter_mut().zip(inst.gt_mask.data()) {
            if m {
                *v = level;
            }
        }
    }
    if spec.noise_level > 0.0 {
        for v in values.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    for v in values.iter_mut() {
        *v = quantize_intensity(*v);
    }
    Ok(Scene {
        image: Field2D::new(h, w, values)?,
        instances,
        seed: spec.seed,
    })
}

/// Rounds to the nearest multiple of 1/255 so images survive 8-bit storage.
pub fn quantize_intensity(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Scene count distribution and seeds for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub n_scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_scenes: 32,
            min_instances: 1,
            max_instances: 4,
            seed: 0,
        }
    }
}

/// Mixes a base seed and an index into a well-spread 64-bit seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetSpec {
    /// Spec of scene `i`, with its own seed and instance count.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let seed = derive_seed(self.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(self.min_instances..=self.max_instances.max(self.min_instances));
        SceneSpec {
            n_instances: n,
            seed,
            ..self.scene.clone()
        }
    }

    pub fn generate(&self) -> Result<Vec<Scene>> {
        (0..self.n_scenes).map(|i| generate_scene(&self.scene_spec(i))).collect()
    }
}

/// Unit jitter draws, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub dtheta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    pub center_frac: f64,
    pub size_frac: f64,
    pub angle_rad: f64,
}

impl PerturbParams {
    pub fn new(center_frac: f64, size_frac: f64, angle_deg: f64) -> Self {
        Self {
            center_frac,
            size_frac,
            angle_rad: angle_deg.to_radians(),
        }
    }
}

/// Applies scaled jitter: center moves by `center_frac * (dx * w, dy * h)`, sides
/// scale by `1 + size_frac * d`, angle shifts by `angle_rad * dtheta`.
pub fn apply_jitter(b: &OrientedBox, p: &PerturbParams, j: &Jitter) -> Result<OrientedBox> {
    let out = OrientedBox::new(
        b.cx + j.dx * p.center_frac * b.w,
        b.cy + j.dy * p.center_frac * b.h,
        b.w * (1.0 + j.dw * p.size_frac),
        b.h * (1.0 + j.dh * p.size_frac),
        b.theta + j.dtheta * p.angle_rad,
    );
    canonicalize(&out)
}

/// Uniform random jitter, deterministic per seed. Draws that collapse a side
/// are rejected and resampled.
pub fn perturb_obb(b: &OrientedBox, p: &PerturbParams, seed: u64) -> Result<OrientedBox> {
    if p.center_frac < 0.0 || p.size_frac < 0.0 || p.angle_rad < 0.0 {
        return Err(Error::InvalidConfig("negative perturbation".into()));
    }
    b.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let j = Jitter {
            dx: rng.gen_range(-1.0..=1.0),
            dy: rng.gen_range(-1.0..=1.0),
            dw: rng.gen_range(-1.0..=1.0),
            dh: rng.gen_range(-1.0..=1.0),
            dtheta: rng.gen_range(-1.0..=1.0),
        };
        match apply_jitter(b, p, &j) {
            Err(Error::NonPositiveSize(_)) => continue,
            r => return r,
        }
    }
    Err(Error::NonPositiveSize("size jitter never left positive sides".into()))
}

/// Mean rotated IoU between a box and `n` seeded perturbations of it.
pub fn perturbation_severity(b: &OrientedBox, p: &PerturbParams, n: usize, seed: u64) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..n {
        acc += rotated_iou(b, &perturb_obb(b, p, derive_seed(seed, i as u64))?)?;
    }
    Ok(acc / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::obb_to_polygon;
    use std::f64::consts::PI;

    fn spec(n: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            n_instances: n,
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let s = generate_scene(&SceneSpec { noise_level: 0.0, ..spec(0, 1) }).unwrap();
        assert!(s.instances.is_empty());
        assert!(s.image.values.iter().all(|&v| v == BACKGROUND_LEVEL));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&spec(3, 7)).unwrap();
        let b = generate_scene(&spec(3, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec(3, 8)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn overlap_cap_respected() {
        for seed in 0..20 {
            let s = generate_scene(&spec(3, seed)).unwrap();
            assert_eq!(s.instances.len(), 3);
            for i in 0..3 {
                for j in i + 1..3 {
                    let iou = rotated_iou(&s.instances[i].gt_obb, &s.instances[j].gt_obb).unwrap();
                    assert!(iou <= 0.1, "seed {seed}: {iou}");
                }
            }
        }
    }

    #[test]
    fn instances_are_self_consistent() {
        for seed in 0..10 {
            let s = generate_scene(&spec(4, seed)).unwrap();
            for inst in &s.instances {
                assert!(inst.gt_mask.count() >= MIN_INSTANCE_PIXELS);
                assert!(inst.gt_obb.is_canonical());
                for p in inst.gt_mask.corner_points() {
                    assert!(inst.gt_obb.contains(p, 1e-7));
                }
                let again = min_area_obb_mask(&inst.gt_mask).unwrap();
                assert_eq!(again, inst.gt_obb);
            }
        }
    }

    #[test]
    fn impossible_cap_fails() {
        let s = SceneSpec {
            n_instances: 40,
            min_size: 30.0,
            max_size: 32.0,
            overlap_cap: 0.0,
            ..spec(0, 0)
        };
        assert!(matches!(generate_scene(&s), Err(Error::PlacementFailure(_))));
    }

    #[test]
    fn bad_dims_rejected() {
        let s = SceneSpec { image_w: 60, ..spec(1, 0) };
        assert!(matches!(generate_scene(&s), Err(Error::BadDims(..))));
    }

    #[test]
    fn dataset_counts_and_seeds() {
        let d = DatasetSpec { n_scenes: 12, ..DatasetSpec::default() };
        let scenes = d.generate().unwrap();
        assert_eq!(scenes.len(), 12);
        assert!(scenes.iter().all(|s| (1..=4).contains(&s.instances.len())));
        let seeds: std::collections::BTreeSet<u64> = scenes.iter().map(|s| s.seed).collect();
        assert_eq!(seeds.len(), 12);
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let b = OrientedBox::new(30.0, 20.0, 14.0, 6.0, 0.4);
        let p = PerturbParams::new(0.0, 0.0, 0.0);
        for seed in 0..5 {
            assert_eq!(perturb_obb(&b, &p, seed).unwrap(), b);
        }
    }

    #[test]
    fn half_turn_is_absorbed() {
        let b = OrientedBox::new(30.0, 20.0, 14.0, 6.0, 0.4);
        let p = PerturbParams { center_frac: 0.0, size_frac: 0.0, angle_rad: PI };
        for d in [1.0, -1.0] {
            let out = apply_jitter(&b, &p, &Jitter { dtheta: d, ..Jitter::default() }).unwrap();
            assert!((out.cx - b.cx).abs() < 1e-12 && (out.w - b.w).abs() < 1e-12);
            assert!((out.theta - b.theta).abs() < 1e-12, "{out:?}");
        }
        let out = perturb_obb(&b, &p, 3).unwrap();
        assert!(out.is_canonical());
        assert_eq!((out.cx, out.cy, out.w, out.h), (b.cx, b.cy, b.w, b.h));
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        let b = OrientedBox::new(32.0, 32.0, 20.0, 10.0, 0.2);
        let p = PerturbParams::new(0.05, 0.05, 10.0);
        assert_eq!(perturb_obb(&b, &p, 9).unwrap(), perturb_obb(&b, &p, 9).unwrap());
        for seed in 0..200 {
            let q = perturb_obb(&b, &p, seed).unwrap();
            assert!((q.cx - b.cx).abs() <= 0.05 * b.w + 1e-12);
            assert!((q.cy - b.cy).abs() <= 0.05 * b.h + 1e-12);
            assert!(q.w <= b.w * 1.05 + 1e-9 && q.w >= b.w * 0.95 - 1e-9);
        }
        let sev = perturbation_severity(&b, &p, 1000, 0).unwrap();
        assert!(sev > 0.75 && sev < 0.98, "{sev}");
        assert!(obb_to_polygon(&b).is_ok());
    }
}
