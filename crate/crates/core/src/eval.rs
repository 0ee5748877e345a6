//! Mask AP over IoU thresholds 0.50:0.95 with COCO-style matching,
//! 101-point interpolation and area bins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, perturb_obb, PerturbParams, Scene};
use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::geometry::{mask_iou, BinaryMask, OrientedBox};
use crate::model::Model;

pub const MASK_THRESHOLD: f64 = 0.5;
pub const RECALL_POINTS: usize = 101;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// `0.50, 0.55, ..., 0.95`
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub scene_id: usize,
    pub mask: BinaryMask,
    pub score: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene_id: usize,
    pub mask: BinaryMask,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Indices of `scores` by descending score; equal scores keep input order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn best_unmatched(ious: &[f64], cand: impl Iterator<Item = usize>, matched: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in cand {
        if matched[j] {
            continue;
        }
        if best.map_or(true, |b| ious[j] > ious[b]) {
            best = Some(j);
        }
    }
    best
}

/// Greedy matching within one scene. Returns an outcome per detection in
/// input order.
fn match_with_ignore(
    dets: &[Detection],
    gts: &[GroundTruth],
    gt_ignore: &[bool],
    det_out_of_range: &[bool],
    thr: f64,
) -> Result<Vec<Outcome>> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut matched = vec![false; gts.len()];
    let mut out = vec![Outcome::Fp; dets.len()];
    for i in score_order(&scores) {
        let d = &dets[i];
        let mut ious = vec![0.0; gts.len()];
        for (j, g) in gts.iter().enumerate() {
            if g.class_id == d.class_id {
                ious[j] = mask_iou(&d.mask, &g.mask)?;
            }
        }
        let same_class = |j: &usize| gts[*j].class_id == d.class_id;
        let regular = best_unmatched(&ious, (0..gts.len()).filter(|j| !gt_ignore[*j]).filter(same_class), &matched);
        if let Some(j) = regular.filter(|&j| ious[j] >= thr) {
            matched[j] = true;
            out[i] = Outcome::Tp;
            continue;
        }
        let ignored = best_unmatched(&ious, (0..gts.len()).filter(|j| gt_ignore[*j]).filter(same_class), &matched);
        if let Some(j) = ignored.filter(|&j| ious[j] >= thr) {
            matched[j] = true;
            out[i] = Outcome::Ignored;
            continue;
        }
        if det_out_of_range[i] {
            out[i] = Outcome::Ignored;
        }
    }
    Ok(out)
}

/// TP (`true`) / FP labels per detection, in input order. Detections are
/// processed by descending score; each GT matches at most once; a detection
/// takes the unmatched GT of its class with the highest IoU (lowest index on
/// ties) and is a TP iff that IoU reaches `thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Result<Vec<bool>> {
    let none_g = vec![false; gts.len()];
    let none_d = vec![false; dets.len()];
    Ok(match_with_ignore(dets, gts, &none_g, &none_d, thr)?
        .into_iter()
        .map(|o| o == Outcome::Tp)
        .collect())
}

/// Interpolated precision at recall `k / 100`, `k = 0..=100`, for labels in
/// descending score order.
pub fn interpolated_precision(labels: &[bool], n_gt: usize) -> Vec<f64> {
    if n_gt == 0 {
        return vec![0.0; RECALL_POINTS];
    }
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &l in labels {
        if l {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut out = vec![0.0; RECALL_POINTS];
    let mut i = 0;
    for (k, q) in out.iter_mut().enumerate() {
        let r = k as f64 / 100.0;
        while i < recall.len() && recall[i] < r {
            i += 1;
        }
        if i < recall.len() {
            *q = precision[i];
        }
    }
    out
}

/// 101-point interpolated AP. Zero when there is no GT.
pub fn average_precision(labels: &[bool], n_gt: usize) -> f64 {
    interpolated_precision(labels, n_gt).iter().sum::<f64>() / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when the bin holds no GT instance.
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub pr_curves: Vec<PrCurve>,
}

impl EvalResult {
    pub fn write_pr_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "threshold,recall,precision")?;
        for c in &self.pr_curves {
            for (r, p) in c.recall.iter().zip(&c.precision) {
                writeln!(w, "{},{},{}", c.iou_threshold, r, p)?;
            }
        }
        Ok(())
    }
}

fn group_by_scene<T>(items: &[T], scene: impl Fn(&T) -> usize) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let mut m = std::collections::BTreeMap::<usize, Vec<usize>>::new();
    for (i, it) in items.iter().enumerate() {
        m.entry(scene(it)).or_default().push(i);
    }
    m
}

/// Pooled labels (descending score) and GT count for one threshold and area range.
fn pooled(dets: &[Detection], gts: &[GroundTruth], thr: f64, area: (f64, f64)) -> Result<(Vec<bool>, usize)> {
    let in_range = |m: &BinaryMask| {
        let a = m.count() as f64;
        a >= area.0 && a < area.1
    };
    let det_groups = group_by_scene(dets, |d| d.scene_id);
    let gt_groups = group_by_scene(gts, |g| g.scene_id);
    let mut outcome = vec![Outcome::Fp; dets.len()];
    let mut n_gt = 0;
    let mut scenes: Vec<usize> = det_groups.keys().chain(gt_groups.keys()).copied().collect();
    scenes.sort_unstable();
    scenes.dedup();
    for s in scenes {
        let di = det_groups.get(&s).cloned().unwrap_or_default();
        let gi = gt_groups.get(&s).cloned().unwrap_or_default();
        let sd: Vec<Detection> = di.iter().map(|&i| dets[i].clone()).collect();
        let sg: Vec<GroundTruth> = gi.iter().map(|&i| gts[i].clone()).collect();
        let gt_ignore: Vec<bool> = sg.iter().map(|g| !in_range(&g.mask)).collect();
        n_gt += gt_ignore.iter().filter(|&&x| !x).count();
        let out_of_range: Vec<bool> = sd.iter().map(|d| !in_range(&d.mask)).collect();
        for (k, o) in match_with_ignore(&sd, &sg, &gt_ignore, &out_of_range, thr)?.into_iter().enumerate() {
            outcome[di[k]] = o;
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let labels = score_order(&scores)
        .into_iter()
        .filter(|&i| outcome[i] != Outcome::Ignored)
        .map(|i| outcome[i] == Outcome::Tp)
        .collect();
    Ok((labels, n_gt))
}

/// Aggregates AP metrics over a set of detections and ground truths.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalResult> {
    for d in dets {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::NonFinite(format!("detection score {}", d.score)));
        }
    }
    let thrs = iou_thresholds();
    let mut aps = Vec::with_capacity(thrs.len());
    let mut pr_curves = Vec::with_capacity(thrs.len());
    for &t in &thrs {
        let (labels, n_gt) = pooled(dets, gts, t, (0.0, f64::INFINITY))?;
        let precision = interpolated_precision(&labels, n_gt);
        aps.push(precision.iter().sum::<f64>() / RECALL_POINTS as f64);
        pr_curves.push(PrCurve {
            iou_threshold: t,
            recall: (0..RECALL_POINTS).map(|k| k as f64 / 100.0).collect(),
            precision,
        });
    }
    let bin = |lo: f64, hi: f64| -> Result<Option<f64>> {
        let mut acc = 0.0;
        for &t in &thrs {
            let (labels, n_gt) = pooled(dets, gts, t, (lo, hi))?;
            if n_gt == 0 {
                return Ok(None);
            }
            acc += average_precision(&labels, n_gt);
        }
        Ok(Some(acc / thrs.len() as f64))
    };
    Ok(EvalResult {
        ap: aps.iter().sum::<f64>() / aps.len() as f64,
        ap50: aps[0],
        ap75: aps[5],
        ap_s: bin(0.0, SMALL_AREA)?,
        ap_m: bin(SMALL_AREA, MEDIUM_AREA)?,
        ap_l: bin(MEDIUM_AREA, f64::INFINITY)?,
        n_gt: gts.len(),
        n_det: dets.len(),
        pr_curves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptSource {
    GtObb,
    Perturbed { params: PerturbParams, seed: u64 },
}

impl PromptSource {
    /// Prompt boxes for the instances of scene `scene_id`.
    pub fn boxes(&self, scene_id: usize, scene: &Scene) -> Result<Vec<OrientedBox>> {
        scene
            .instances
            .iter()
            .enumerate()
            .map(|(k, inst)| match self {
                PromptSource::GtObb => Ok(inst.gt_obb),
                PromptSource::Perturbed { params, seed } => {
                    let s = derive_seed(derive_seed(*seed, scene_id as u64), k as u64);
                    perturb_obb(&inst.gt_obb, params, s)
                }
            })
            .collect()
    }
}

/// Binary mask at [`MASK_THRESHOLD`] and mean probability inside it (0 for an
/// empty mask).
pub fn mask_and_score(prob: &Field2D) -> (BinaryMask, f64) {
    let mask = prob.threshold(MASK_THRESHOLD);
    let n = mask.count();
    let score = if n == 0 {
        0.0
    } else {
        prob.values
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
            .sum::<f64>()
            / n as f64
    };
    (mask, score)
}

fn scene_predictions(model: &Model, scene_id: usize, scene: &Scene, source: &PromptSource) -> Result<Vec<Detection>> {
    let boxes = source.boxes(scene_id, scene)?;
    let logits = model.predict(&scene.image, &boxes)?;
    Ok(logits
        .iter()
        .zip(&scene.instances)
        .map(|(l, inst)| {
            let (mask, score) = mask_and_score(&l.sigmoid());
            Detection {
                scene_id,
                mask,
                score,
                class_id: inst.class_id,
            }
        })
        .collect())
}

/// Runs `f` over scene indices on up to `threads` workers; results keep scene order.
pub fn map_scenes<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One detection per GT instance, prompted by `source`.
pub fn evaluate_dataset(model: &Model, scenes: &[Scene], source: &PromptSource, threads: usize) -> Result<EvalResult> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_scene = map_scenes(scenes.len(), threads, |i| scene_predictions(model, i, &scenes[i], source))?;
    let dets: Vec<Detection> = per_scene.into_iter().flatten().collect();
    let gts: Vec<GroundTruth> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.instances.iter().map(move |inst| GroundTruth {
                scene_id: i,
                mask: inst.gt_mask.clone(),
                class_id: inst.class_id,
            })
        })
        .collect();
    evaluate(&dets, &gts)
}

/// Mean IoU between the binary masks of two models over every instance.
pub fn mask_agreement(a: &Model, b: &Model, scenes: &[Scene], source: &PromptSource, threads: usize) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_scene = map_scenes(scenes.len(), threads, |i| {
        let da = scene_predictions(a, i, &scenes[i], source)?;
        let db = scene_predictions(b, i, &scenes[i], source)?;
        da.iter()
            .zip(&db)
            .map(|(x, y)| mask_iou(&x.mask, &y.mask))
            .collect::<Result<Vec<f64>>>()
    })?;
    let all: Vec<f64> = per_scene.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}
