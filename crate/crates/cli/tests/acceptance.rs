//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `OBSEG_ACCEPTANCE=1,3,8` runs a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obseg::config::ExperimentConfig;
use obseg::data::{generate_scene, PerturbParams, Scene, SceneSpec};
use obseg::eval::{average_precision, evaluate, evaluate_dataset, mask_agreement, Detection, GroundTruth, PromptSource};
use obseg::experiment::{run_student, run_teacher, PERTURB_SEED};
use obseg::geometry::{mask_iou, min_area_obb_points, rotated_iou, BinaryMask, OrientedBox, Point};
use obseg::model::{Model, ModelConfig, Role};
use obseg::prompt_encoder::AgpeConfig;
use obseg::smoothing::{gaussian_kernel_1d, gaussian_kernel_2d, DistillConfig, TARGET_PRESETS};
use obseg::train::{gradient_check, teacher_step, GradCheck, TrainState};

/// Regression pins for the prompt-robustness criterion (AP with GT prompts,
/// AP with perturbed prompts) and their tolerance.
const PINNED_ROBUSTNESS: Option<(f64, f64)> = Some((0.7895, 0.7727));
const PIN_TOL: f64 = 0.02;

struct Report {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
    limit: f64,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- kernels

fn kernels() -> (bool, String) {
    let mut worst_sum: f64 = 0.0;
    let mut worst_direct: f64 = 0.0;
    let two_pi = std::f64::consts::TAU;
    for k in [1usize, 3, 5, 7] {
        for s in [0.3, 0.5, 1.0] {
            let c = (k / 2) as f64;
            let k1 = gaussian_kernel_1d(k, s).unwrap();
            let raw: Vec<f64> = (0..k)
                .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp() / (two_pi.sqrt() * s))
                .collect();
            let z: f64 = raw.iter().sum();
            for (w, r) in k1.weights.iter().zip(&raw) {
                worst_direct = worst_direct.max((w - r / z).abs());
            }
            worst_sum = worst_sum.max((k1.weights.iter().sum::<f64>() - 1.0).abs());

            let k2 = gaussian_kernel_2d(k, s).unwrap();
            let mut raw2 = Vec::new();
            for u in 0..k {
                for v in 0..k {
                    let r2 = (u as f64 - c).powi(2) + (v as f64 - c).powi(2);
                    raw2.push((-r2 / (2.0 * s * s)).exp() / (two_pi * s * s));
                }
            }
            let z2: f64 = raw2.iter().sum();
            for (w, r) in k2.weights.iter().zip(&raw2) {
                worst_direct = worst_direct.max((w - r / z2).abs());
            }
            worst_sum = worst_sum.max((k2.weights.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let w = gaussian_kernel_1d(3, 1.0).unwrap().weights;
    let expect = [0.2741, 0.4519, 0.2741];
    let ref_err = w.iter().zip(&expect).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let pass = worst_sum <= 1e-12 && worst_direct <= 1e-12 && ref_err <= 1e-4;
    (
        pass,
        format!("max |sum-1| {worst_sum:.1e}, max direct err {worst_direct:.1e}, k=3 sigma=1 {w:.4?}"),
    )
}

// ---------------------------------------------------------------- gradients

fn gradients() -> (bool, String) {
    let cfg = ExperimentConfig::default();
    let scene = generate_scene(&SceneSpec {
        n_instances: 2,
        seed: 11,
        ..SceneSpec::default()
    })
    .unwrap();
    let student = Model::init(&cfg.model, &cfg.agpe, Role::Student, 1).unwrap();
    let teacher = Model::init(&cfg.model, &cfg.agpe, Role::Teacher, 2).unwrap();
    let gc = GradCheck {
        model: &student,
        scene: &scene,
        supervised: true,
        teacher: Some((&teacher, DistillConfig::default())),
    };
    let r = gradient_check(&gc, 50, 0).unwrap();
    let modules = ["enc.", "prompt.", "dec."].map(|p| r.probes.iter().filter(|x| x.name.starts_with(p)).count());
    let pass = r.probes.len() == 50 && r.max_rel_err <= 1e-4;
    (
        pass,
        format!("50 probes (enc/prompt/dec {modules:?}), max rel err {:.2e}", r.max_rel_err),
    )
}

// ---------------------------------------------------------------- geometry

fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0
}

fn mc_iou(a: &OrientedBox, b: &OrientedBox, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ra = (a.w.hypot(a.h)) / 2.0;
    let rb = (b.w.hypot(b.h)) / 2.0;
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let y0 = (a.cy - ra).min(b.cy - rb);
    let y1 = (a.cy + ra).max(b.cy + rb);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..n {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn extent_area(points: &[Point], t: f64) -> f64 {
    let (s, c) = t.sin_cos();
    let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        let u = p.x * c + p.y * s;
        let v = -p.x * s + p.y * c;
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    (u1 - u0) * (v1 - v0)
}

/// Sweep of the bounding-rectangle area over [0, 90) degrees in 0.05 degree
/// steps, refined by ternary search around the best few grid angles.
fn sweep_min_area(points: &[Point]) -> f64 {
    let step = 0.05f64.to_radians();
    let n = 1800;
    let mut grid: Vec<(f64, f64)> = (0..n).map(|i| (extent_area(points, i as f64 * step), i as f64 * step)).collect();
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = grid[0].0;
    for &(_, t) in grid.iter().take(8) {
        let (mut lo, mut hi) = (t - step, t + step);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if extent_area(points, m1) < extent_area(points, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best = best.min(extent_area(points, 0.5 * (lo + hi)));
    }
    best
}

fn geometry() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_iou: f64 = 0.0;
    for _ in 0..100 {
        let rb = |rng: &mut ChaCha8Rng| {
            OrientedBox::new(
                rng.gen_range(20.0..30.0),
                rng.gen_range(20.0..30.0),
                rng.gen_range(4.0..20.0),
                rng.gen_range(2.0..12.0),
                rng.gen_range(-1.5..1.5),
            )
        };
        let (a, b) = (rb(&mut rng), rb(&mut rng));
        let exact = rotated_iou(&a, &b).unwrap();
        worst_iou = worst_iou.max((exact - mc_iou(&a, &b, 1_000_000, &mut rng)).abs());
    }
    let sq = rotated_iou(
        &OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0),
        &OrientedBox::new(0.0, 0.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4),
    )
    .unwrap();
    let mut worst_area: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(3..40);
        let sx = rng.gen_range(1.0..30.0);
        let sy = rng.gen_range(1.0..30.0);
        let rot: f64 = rng.gen_range(0.0..3.2);
        let (s, c) = rot.sin_cos();
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(-sx..sx), rng.gen_range(-sy..sy));
                Point::new(x * c - y * s + 40.0, x * s + y * c + 40.0)
            })
            .collect();
        let b = min_area_obb_points(&pts).unwrap();
        let oracle = sweep_min_area(&pts);
        worst_area = worst_area.max(((b.w * b.h) - oracle).abs() / oracle);
    }
    let pass = worst_iou <= 5e-3 && (sq - 0.7071).abs() <= 2e-3 && worst_area <= 1e-6;
    (
        pass,
        format!("max |IoU - MC| {worst_iou:.2e}, 45deg square {sq:.4}, max rel area err {worst_area:.1e}"),
    )
}

// ---------------------------------------------------------------- overfit

fn overfit() -> (bool, String) {
    let scene = generate_scene(&SceneSpec {
        n_instances: 3,
        seed: 0,
        ..SceneSpec::default()
    })
    .unwrap();
    let agpe = AgpeConfig {
        l: 32,
        seed: 0,
        ..AgpeConfig::default()
    };
    let model = Model::init(&ModelConfig::default(), &agpe, Role::Teacher, 0).unwrap();
    let mut st = TrainState::new(model, 1e-3, 0);
    let boxes: Vec<OrientedBox> = scene.instances.iter().map(|i| i.gt_obb).collect();
    let iou = |m: &Model| -> f64 {
        let preds = m.predict(&scene.image, &boxes).unwrap();
        let s: f64 = preds
            .iter()
            .zip(&scene.instances)
            .map(|(p, i)| mask_iou(&p.sigmoid().threshold(0.5), &i.gt_mask).unwrap())
            .sum();
        s / boxes.len() as f64
    };
    let mut reached = None;
    let mut last = 0.0;
    for step in 1..=500 {
        teacher_step(&mut st, &scene).unwrap();
        if step % 10 == 0 {
            last = iou(&st.model);
            if last >= 0.95 {
                reached = Some(step);
                break;
            }
        }
    }
    match reached {
        Some(s) => (true, format!("mask IoU {last:.4} after {s} steps")),
        None => (false, format!("mask IoU {last:.4} after 500 steps")),
    }
}

// ---------------------------------------------------------------- distillation

struct SeedRun {
    teacher: Model,
    test: Vec<Scene>,
    teacher_secs: f64,
}

fn seed_run(cfg: &ExperimentConfig) -> SeedRun {
    let ((teacher, test), teacher_secs) = timed(|| {
        let train = cfg.train_set().unwrap();
        (run_teacher(cfg, &train).unwrap().model, cfg.test_set().unwrap())
    });
    SeedRun {
        teacher,
        test,
        teacher_secs,
    }
}

fn student(cfg: &ExperimentConfig, teacher: &Model, preset: &str) -> (Model, f64) {
    timed(|| {
        let train = cfg.train_set().unwrap();
        let d = cfg.distill.with_preset(preset).unwrap();
        run_student(cfg, teacher, &train, &d).unwrap().model
    })
}

// ---------------------------------------------------------------- evaluator

fn evaluator() -> (bool, String) {
    fn oracle(labels: &[bool], n_gt: usize) -> f64 {
        if n_gt == 0 {
            return 0.0;
        }
        let pts: Vec<(f64, f64)> = (1..=labels.len())
            .map(|c| {
                let tp = labels[..c].iter().filter(|&&l| l).count() as f64;
                (tp / n_gt as f64, tp / c as f64)
            })
            .collect();
        let mut s = 0.0;
        for k in 0..101 {
            let r = k as f64 / 100.0;
            s += pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        }
        s / 101.0
    }
    let mut checked = 0;
    let mut mismatches = 0;
    for len in 0..=8usize {
        for bits in 0u32..(1 << len) {
            let labels: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            let tp = labels.iter().filter(|&&l| l).count();
            for n_gt in tp.max(1)..=tp + 2 {
                checked += 1;
                if average_precision(&labels, n_gt) != oracle(&labels, n_gt) {
                    mismatches += 1;
                }
            }
        }
    }
    let rect = |r0: usize, c0: usize| BinaryMask::from_fn(32, 32, |r, c| (r0..r0 + 5).contains(&r) && (c0..c0 + 7).contains(&c));
    let gts = vec![
        GroundTruth { scene_id: 0, mask: rect(2, 2), class_id: 0 },
        GroundTruth { scene_id: 0, mask: rect(20, 20), class_id: 0 },
        GroundTruth { scene_id: 1, mask: rect(10, 4), class_id: 0 },
    ];
    let perfect: Vec<Detection> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| Detection { scene_id: g.scene_id, mask: g.mask.clone(), score: 0.9 - 0.1 * i as f64, class_id: 0 })
        .collect();
    let wrong: Vec<Detection> = gts
        .iter()
        .map(|g| Detection { scene_id: g.scene_id, mask: rect(26, 0), score: 0.8, class_id: 0 })
        .collect();
    let hi = evaluate(&perfect, &gts).unwrap().ap50;
    let lo = evaluate(&wrong, &gts).unwrap().ap50;
    let pass = mismatches == 0 && hi == 1.0 && lo == 0.0;
    (
        pass,
        format!("{checked} sequences, {mismatches} mismatches; micro-dataset AP50 {hi} / {lo}"),
    )
}

// ---------------------------------------------------------------- determinism

const TINY: &str = r#"{
  "agpe": {"l": 8},
  "model": {"token_dim": 16, "encoder_channels": [8], "attn_dim": 8, "upsample_channels": 4, "decoder_blocks": 1},
  "data": {"scene": {"image_w": 16, "image_h": 16, "min_size": 6.0, "max_size": 12.0}, "train_scenes": 2, "test_scenes": 2, "max_instances": 2},
  "schedule": {"teacher_epochs": 1, "distill_epochs": 1, "teacher_pretrain_steps": 3, "student_encoder_steps": 3, "student_pretrain_steps": 3},
  "ablation": {"kind": "targets", "seeds": [0], "modes": ["T", "T+GS"]}
}"#;

fn cli_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    std::fs::write(dir.join("cfg.json"), TINY).unwrap();
    std::fs::write(dir.join("a.json"), r#"{"cx": 10.0, "cy": 12.0, "w": 8.0, "h": 4.0, "theta": 0.3}"#).unwrap();
    std::fs::write(dir.join("b.json"), r#"{"cx": 11.0, "cy": 12.0, "w": 8.0, "h": 4.0, "theta": -0.2}"#).unwrap();
    let cfg = p("cfg.json");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("geom iou", vec!["geom".into(), "iou".into(), "--a".into(), p("a.json"), "--b".into(), p("b.json")]),
        ("synth", vec!["synth".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into(), "--out".into(), p("data")]),
        ("geom min-obb", vec!["geom".into(), "min-obb".into(), "--mask".into(), p("data/scene_00000_mask_00.pgm")]),
        ("encode", vec!["encode".into(), "--box".into(), p("a.json"), "--image-size".into(), "64".into(), "64".into(), "--out".into(), p("emb.obt")]),
        ("train-teacher", vec!["train-teacher".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into(), "--out".into(), p("t.obt")]),
        ("distill", vec!["distill".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into(), "--teacher".into(), p("t.obt"), "--out".into(), p("s.obt")]),
        ("eval", vec!["eval".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into(), "--model".into(), p("s.obt"), "--perturb".into(), "0.05".into(), "0.05".into(), "10".into(), "--pr-csv".into(), p("pr.csv")]),
        ("ablate", vec!["ablate".into(), "--config".into(), cfg.clone(), "--seed".into(), "5".into(), "--out".into(), p("ablate.json")]),
        ("gradcheck", vec!["gradcheck".into(), "--config".into(), cfg, "--seed".into(), "5".into(), "--probes".into(), "10".into()]),
    ];
    let mut outs = Vec::new();
    for (name, args) in commands {
        let o = Command::new(env!("CARGO_BIN_EXE_obseg")).args(&args).output().unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        outs.push((format!("{name} stdout"), o.stdout));
    }
    let mut files: Vec<_> = walk(dir).into_iter().collect();
    files.sort();
    for f in files {
        let bytes = std::fs::read(&f).unwrap();
        outs.push((f.strip_prefix(dir).unwrap().display().to_string(), bytes));
    }
    outs
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> (bool, String) {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (cli_run(d1.path()), cli_run(d2.path()));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = a.len() == b.len() && differing.is_empty();
    (
        pass,
        format!("9 subcommands, {} artifacts compared, differing: {differing:?}", a.len()),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    let only: Option<Vec<u32>> = std::env::var("OBSEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: u32| only.as_ref().map_or(true, |o| o.contains(&id));
    let mut reports: Vec<Report> = Vec::new();
    let mut push = |id, name, limit, ((pass, detail), secs): ((bool, String), f64)| {
        let r = Report { id, name, pass: pass && secs < limit, detail, secs, limit };
        println!(
            "[{}] criterion {} {}: {} ({:.1} s, limit {:.0} s)",
            if r.pass { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.detail,
            r.secs,
            r.limit
        );
        reports.push(r);
    };

    if want(1) {
        push(1, "kernel correctness", 1.0, timed(kernels));
    }
    if want(2) {
        push(2, "gradient fidelity", 120.0, timed(gradients));
    }
    if want(3) {
        push(3, "geometry oracles", 120.0, timed(geometry));
    }
    if want(4) {
        push(4, "overfit sanity", 300.0, timed(overfit));
    }
    if want(8) {
        push(8, "AP evaluator equivalence", 60.0, timed(evaluator));
    }
    if want(9) {
        push(9, "determinism", 300.0, timed(determinism));
    }

    if want(5) || want(6) || want(7) {
        let base = ExperimentConfig::default();
        let cfg0 = base.with_seed(0);
        let run0 = seed_run(&cfg0);
        let (gs0, gs_secs) = student(&cfg0, &run0.teacher, "T+GS");
        let gt = PromptSource::GtObb;

        if want(5) {
            let (agree, secs) = timed(|| mask_agreement(&run0.teacher, &gs0, &run0.test, &gt, 1).unwrap());
            let secs = secs + run0.teacher_secs + gs_secs;
            push(
                5,
                "distillation fidelity",
                900.0,
                ((agree >= 0.90, format!("T+GS student/teacher held-out agreement IoU {agree:.4}")), secs),
            );
        }
        if want(7) {
            let ((base_ap, pert_ap), secs) = timed(|| {
                let pert = PromptSource::Perturbed {
                    params: PerturbParams::new(0.05, 0.05, 10.0),
                    seed: PERTURB_SEED,
                };
                (
                    evaluate_dataset(&gs0, &run0.test, &gt, 1).unwrap().ap,
                    evaluate_dataset(&gs0, &run0.test, &pert, 1).unwrap().ap,
                )
            });
            let drop = if base_ap > 0.0 { (base_ap - pert_ap) / base_ap } else { 1.0 };
            let pinned = PINNED_ROBUSTNESS.map_or(true, |(g, p)| (g - base_ap).abs() <= PIN_TOL && (p - pert_ap).abs() <= PIN_TOL);
            push(
                7,
                "prompt robustness",
                600.0,
                (
                    (
                        drop <= 0.20 && pinned,
                        format!("AP GT prompts {base_ap:.4}, perturbed {pert_ap:.4}, relative drop {:.1}%, pin {}", 100.0 * drop, if PINNED_ROBUSTNESS.is_some() { "checked" } else { "unset" }),
                    ),
                    secs + run0.teacher_secs + gs_secs,
                ),
            );
        }
        if want(6) {
            let t0 = Instant::now();
            let seeds = [0u64, 1, 2];
            let mut table: Vec<(String, Vec<f64>, Vec<f64>)> = TARGET_PRESETS.iter().map(|p| (p.to_string(), vec![], vec![])).collect();
            for &seed in &seeds {
                let cfg = base.with_seed(seed);
                let fresh;
                let run = if seed == 0 {
                    &run0
                } else {
                    fresh = seed_run(&cfg);
                    &fresh
                };
                for (name, ap50s, aps) in table.iter_mut() {
                    let m = if seed == 0 && name == "T+GS" { gs0.clone() } else { student(&cfg, &run.teacher, name).0 };
                    let r = evaluate_dataset(&m, &run.test, &gt, 1).unwrap();
                    ap50s.push(r.ap50);
                    aps.push(r.ap);
                }
            }
            let secs = t0.elapsed().as_secs_f64() + run0.teacher_secs + gs_secs;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!("  target-mode report over seeds {seeds:?} (held-out, GT prompts):");
            println!("  {:<8} {:>8} {:>8}   per-seed AP50", "mode", "AP50", "AP");
            for (name, ap50s, aps) in &table {
                println!("  {:<8} {:>8.4} {:>8.4}   {:.4?}", name, mean(ap50s), mean(aps), ap50s);
            }
            let row = |n: &str| table.iter().find(|r| r.0 == n).unwrap();
            let (gs, t) = (mean(&row("T+GS").1), mean(&row("T").1));
            push(
                6,
                "ablation direction",
                3600.0,
                ((gs >= t - 0.01, format!("mean AP50 T+GS {gs:.4} vs T {t:.4}")), secs),
            );
        }
    }

    let failed: Vec<u32> = reports.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        reports.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
