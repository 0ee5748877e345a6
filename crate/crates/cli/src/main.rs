use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use obseg::checkpoint::{load_model, load_state, save_state};
use obseg::config::ExperimentConfig;
use obseg::data::{PerturbParams, Scene};
use obseg::eval::{evaluate_dataset, PromptSource};
use obseg::experiment::{run_ablation, run_student, run_teacher};
use obseg::geometry::{min_area_obb_mask, min_area_obb_points, rotated_iou, OrientedBox, Point};
use obseg::io::{read_dataset, read_mask, to_json_pretty, write_dataset};
use obseg::model::PROMPT;
use obseg::obt::{Obt, ObtEntry, TensorData};
use obseg::prompt_encoder::{encode_obb, init_encoder, AgpeConfig, EncoderParams};
use obseg::train::{gradient_check, GradCheck};

#[derive(Parser)]
#[command(name = "obseg", about = "Oriented-box prompted instance segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Box geometry utilities.
    #[command(subcommand)]
    Geom(GeomCmd),
    /// Encode one oriented box into prompt tokens.
    Encode(EncodeArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a teacher and write its checkpoint.
    TrainTeacher(TrainArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Run the ablation described in the config.
    Ablate(AblateArgs),
    /// Finite-difference gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum GeomCmd {
    /// Minimum-area oriented box of a mask (PGM) or a JSON point list.
    MinObb {
        #[arg(long, conflicts_with = "points", required_unless_present = "points")]
        mask: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rotated IoU of two boxes given as JSON.
    Iou {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long = "box")]
    obb: PathBuf,
    /// Prompt encoder tensors, or a full checkpoint.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    image_size: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    l: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["train", "test"], default_value = "train")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target preset overriding the config (e.g. T+GS).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Jitter prompts: center fraction, size fraction, angle in degrees.
    #[arg(long, num_args = 3, value_names = ["CENTER", "SIZE", "DEG"])]
    perturb: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to check; a fresh teacher when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    probes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("OBSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail),
        _ => avail,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn scenes(cfg: &ExperimentConfig, data: Option<&Path>, train: bool) -> Result<Vec<Scene>> {
    Ok(match data {
        Some(d) => read_dataset(d)?.1,
        None if train => cfg.train_set()?,
        None => cfg.test_set()?,
    })
}

fn geom(cmd: GeomCmd) -> Result<()> {
    match cmd {
        GeomCmd::MinObb { mask, points, out } => {
            let obb = match (mask, points) {
                (Some(m), _) => min_area_obb_mask(&read_mask(&m)?)?,
                (None, Some(p)) => {
                    let pts: Vec<[f64; 2]> = read_json(&p)?;
                    min_area_obb_points(&pts.iter().map(|q| Point::new(q[0], q[1])).collect::<Vec<_>>())?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            emit(out.as_deref(), &to_json_pretty(&obb)?)
        }
        GeomCmd::Iou { a, b } => {
            let (a, b): (OrientedBox, OrientedBox) = (read_json(&a)?, read_json(&b)?);
            println!("{}", json!({ "iou": rotated_iou(&a, &b)? }));
            Ok(())
        }
    }
}

fn encode(args: EncodeArgs) -> Result<()> {
    let obb: OrientedBox = read_json(&args.obb)?;
    let enc = match &args.params {
        Some(p) => {
            let store = Obt::load(p)?.to_store();
            let sub = store.sub_store(PROMPT);
            EncoderParams::from_store(if sub.is_empty() { &store } else { &sub })?
        }
        None => init_encoder(&AgpeConfig {
            l: args.l,
            seed: args.seed,
            ..AgpeConfig::default()
        })?,
    };
    let (w, h) = match args.image_size.as_slice() {
        [w, h] => (*w as f64, *h as f64),
        _ => (64.0, 64.0),
    };
    let e = encode_obb(&obb, w, h, &enc)?;
    let mut obt = Obt::new();
    for (name, v) in [("e_phi1", &e.e_phi1), ("e_phi2", &e.e_phi2), ("e_theta", &e.e_theta)] {
        obt.push(ObtEntry::new(name, vec![v.len() as u64], TensorData::F64(v.clone()))?)?;
    }
    obt.push(ObtEntry::from_tensor("p_obb", &e.tokens()))?;
    obt.save(&args.out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Geom(g) => geom(g),
        Cmd::Encode(a) => encode(a),
        Cmd::Synth(a) => {
            let cfg = a.common.load()?;
            let spec = if a.split == "train" {
                cfg.data.train_spec(cfg.seed)
            } else {
                cfg.data.test_spec(cfg.seed)
            };
            write_dataset(&a.out, &spec, &spec.generate()?)?;
            Ok(())
        }
        Cmd::TrainTeacher(a) => {
            let cfg = a.common.load()?;
            let train = scenes(&cfg, a.data.as_deref(), true)?;
            let st = run_teacher(&cfg, &train)?;
            save_state(&a.out, &st)?;
            println!("{}", json!({ "steps": st.step, "loss_curve": st.loss_curve }));
            Ok(())
        }
        Cmd::Distill(a) => {
            let cfg = a.common.load()?;
            let distill = match &a.preset {
                Some(p) => cfg.distill.with_preset(p)?,
                None => cfg.distill.clone(),
            };
            let teacher = load_model(&a.teacher)?;
            let train = scenes(&cfg, a.data.as_deref(), true)?;
            let st = run_student(&cfg, &teacher, &train, &distill)?;
            save_state(&a.out, &st)?;
            println!("{}", json!({ "steps": st.step, "loss_curve": st.loss_curve }));
            Ok(())
        }
        Cmd::Eval(a) => {
            let cfg = a.common.load()?;
            let model = load_model(&a.model)?;
            let test = scenes(&cfg, a.data.as_deref(), false)?;
            let source = match a.perturb.as_deref() {
                Some([c, s, d]) => PromptSource::Perturbed {
                    params: PerturbParams::new(*c, *s, *d),
                    seed: cfg.seed,
                },
                Some(_) => bail!("--perturb takes three values"),
                None => PromptSource::GtObb,
            };
            let r = evaluate_dataset(&model, &test, &source, threads())?;
            if let Some(p) = &a.pr_csv {
                r.write_pr_csv(std::fs::File::create(p)?)?;
            }
            emit(a.out.as_deref(), &to_json_pretty(&r)?)
        }
        Cmd::Ablate(a) => {
            let cfg = a.common.load()?;
            let report = run_ablation(&cfg, threads(), &mut |line| eprintln!("{line}"))?;
            std::fs::write(&a.out, to_json_pretty(&report)?)?;
            Ok(())
        }
        Cmd::Gradcheck(a) => {
            let cfg = a.common.load()?;
            let model = match &a.model {
                Some(p) => load_state(p)?.model,
                None => obseg::model::Model::init(&cfg.model, &cfg.agpe, obseg::model::Role::Teacher, cfg.seed)?,
            };
            let train = cfg.train_set()?;
            let scene = train
                .iter()
                .find(|s| !s.instances.is_empty())
                .context("no scene with instances")?;
            let gc = GradCheck {
                model: &model,
                scene,
                supervised: true,
                teacher: None,
            };
            let r = gradient_check(&gc, a.probes, cfg.seed)?;
            emit(a.out.as_deref(), &to_json_pretty(&r)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
