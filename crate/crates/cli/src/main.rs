use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mambast::harness::data::{generate, read_dataset, write_dataset};
use mambast::harness::train::{detect, evaluate_detections, DETERMINISTIC_ENV};
use mambast::harness::{Checkpoint, Fuser, RunConfig, SplitReport};
use mambast::metrics::{self, EvalSetting};
use mambast::profiler;
use mambast::{FusionConfig, FusionModel};

#[derive(Parser)]
#[command(name = "mambast", version, about = "RGB-thermal state-space fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a default run configuration as TOML.
    Config {
        #[arg(long, default_value = "mambast")]
        fuser: Fuser,
    },
    /// Render the synthetic training (or held-out) set to a directory.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out evaluation clips instead of the training clips.
        #[arg(long)]
        heldout: bool,
    },
    /// Train a detector and write the checkpoint, loss log and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fuser: Option<Fuser>,
        #[arg(long)]
        steps: Option<usize>,
        /// Read training clips from a directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out clips.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint stem, e.g. `runs/a/model`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Carry context length; 1 resets the carry every frame.
        #[arg(long)]
        frames: Option<usize>,
        /// Read clips from a directory written by `gen`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also write the raw detections as JSONL.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Train and evaluate every fuser under one configuration.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// LAMR and recall of detection JSONL against ground-truth JSONL.
    Score {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "reasonable")]
        setting: EvalSetting,
        #[arg(long, default_value_t = metrics::DEFAULT_IOU)]
        iou: f64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Parameter and FLOP counts per fusion stage.
    Profile {
        /// Fusion config as JSON; defaults to the published layout.
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Wall-clock latency per fusion stage on random inputs, plus the counts.
    Bench {
        /// Fusion config as JSON; defaults to the published layout.
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Quick structural checks of the fusion pipeline.
    Selfcheck,
}

fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::new(Fuser::Mambast)),
    }
}

fn load_fusion(path: Option<&Path>) -> Result<FusionConfig> {
    match path {
        Some(p) => {
            serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(FusionConfig::published()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn split_table(rows: &[(String, Vec<SplitReport>)]) -> String {
    let mut s = format!("{:<14} {:<6} {:>9} {:>9} {:>7}\n", "model", "split", "LAMR %", "recall %", "gts");
    for (name, reps) in rows {
        for r in reps {
            s.push_str(&format!(
                "{:<14} {:<6} {:>9.2} {:>9.2} {:>7}\n",
                name, r.split, r.report.lamr, r.report.recall, r.report.ground_truths
            ));
        }
    }
    s
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Config { fuser } => print!("{}", RunConfig::new(fuser).to_toml()?),
        Cmd::Gen { config, out, heldout } => {
            let run = load_run(config.as_deref())?;
            let spec = if heldout { run.eval_spec() } else { run.data.clone() };
            let clips = generate(&spec)?;
            write_dataset(&out, &spec, &clips)?;
            println!("{} clips written to {}", clips.len(), out.display());
        }
        Cmd::Train { config, out, fuser, steps, data } => {
            let mut run = load_run(config.as_deref())?;
            if let Some(f) = fuser {
                run.fuser = f;
            }
            if let Some(s) = steps {
                run.train.steps = s;
            }
            let clips = match data {
                Some(d) => read_dataset(d)?.1,
                None => generate(&run.data)?,
            };
            let (ckpt, report) = mambast::harness::train(&run, &clips, Some(&out))?;
            ckpt.save(out.join("model"))?;
            std::fs::write(out.join("run.toml"), run.to_toml()?)?;
            write_json(&out.join("train.json"), &report)?;
            println!(
                "{}: loss {:.4} -> {:.4} over {} steps (checkpoint {})",
                report.fuser,
                report.initial_loss,
                report.final_loss,
                report.steps,
                out.join("model").display()
            );
        }
        Cmd::Eval { config, checkpoint, frames, data, json, detections } => {
            let mut run = load_run(config.as_deref())?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            if config.is_none() {
                run.fuser = ckpt.detector.fuser;
                run.model = ckpt.detector.model.clone();
                run.data.image = ckpt.detector.image;
            }
            ckpt.check(&run)?;
            if let Some(f) = frames {
                run.eval.frames = f;
            }
            let clips = match data {
                Some(d) => read_dataset(d)?.1,
                None => generate(&run.eval_spec())?,
            };
            let dets = detect(&ckpt, &clips, &run.eval)?;
            if let Some(p) = detections {
                metrics::write_jsonl(p, &dets)?;
            }
            let reps = evaluate_detections(&clips, &dets, &run.eval)?;
            print!("{}", split_table(&[(run.fuser.to_string(), reps.clone())]));
            if let Some(p) = json {
                write_json(&p, &reps)?;
            }
        }
        Cmd::Compare { config, out, steps } => {
            let base = load_run(config.as_deref())?;
            let train_clips = generate(&base.data)?;
            let test_clips = generate(&base.eval_spec())?;
            let mut rows = Vec::new();
            let mut summary = Vec::new();
            for fuser in Fuser::ALL {
                let mut run = base.clone();
                run.fuser = fuser;
                if let Some(s) = steps {
                    run.train.steps = s;
                }
                let dir = out.join(fuser.name());
                let (ckpt, report) = mambast::harness::train(&run, &train_clips, Some(&dir))?;
                ckpt.save(dir.join("model"))?;
                write_json(&dir.join("train.json"), &report)?;
                let reps = evaluate_detections(&test_clips, &detect(&ckpt, &test_clips, &run.eval)?, &run.eval)?;
                println!("{fuser}: loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
                summary.push(serde_json::json!({"fuser": fuser, "train": report, "eval": reps}));
                rows.push((fuser.to_string(), reps));
            }
            print!("{}", split_table(&rows));
            write_json(&out.join("compare.json"), &summary)?;
        }
        Cmd::Score { detections, gt, setting, iou, json } => {
            let dets = metrics::read_jsonl(&detections)?;
            let gts = metrics::read_jsonl(&gt)?;
            let r = metrics::evaluate(&dets, &gts, setting, iou)?;
            println!(
                "{setting}: LAMR {:.2}%  recall {:.2}%  ({} frames, {} ground truths)",
                r.lamr, r.recall, r.frames, r.ground_truths
            );
            if let Some(p) = json {
                write_json(&p, &r)?;
            }
        }
        Cmd::Profile { fusion, json } => {
            let report = profiler::count(&load_fusion(fusion.as_deref())?)?;
            print!("{}", profiler::render_table(&report));
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Cmd::Bench { fusion, reps, warmup, seed, json } => {
            if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
                log::warn!("{DETERMINISTIC_ENV}=1: latency is measured single-threaded");
            }
            let model = FusionModel::init(load_fusion(fusion.as_deref())?, seed)?;
            let report = profiler::bench_latency(&model, reps, warmup, seed)?;
            print!("{}", profiler::render_table(&report));
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Cmd::Selfcheck => {
            let results = mambast::selfcheck::run()?;
            let mut failed = 0;
            for r in &results {
                println!("[{}] {:<28} {}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} self-check(s) failed");
            }
        }
    }
    Ok(())
}

