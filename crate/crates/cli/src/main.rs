use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use tide_core::config::ExperimentConfig;
use tide_core::pipeline::{compare, load_report, Pipeline};
use tide_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tide", version, about = "Discover smooth state variables from simulated observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; replaces the configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and observe the dataset.
    Gen(Common),
    /// Train one stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Estimate the intrinsic dimension of the stage-one latents.
    EstimateId(Common),
    /// Extract stage-two latents of a split.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<String>,
    },
    /// Fit expressions of the human variables to each latent.
    Symfit(Common),
    /// Smoothness, mutual information and AMSE.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<String>,
    },
    /// Write the report bundle, optionally compared with another run.
    Report {
        #[command(flatten)]
        common: Common,
        /// metrics.json of a paired run.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Every step in order.
    Run(Common),
}

fn pipeline(c: &Common, split: Option<&String>) -> Result<Pipeline> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = split {
        cfg.metrics.split = s.clone();
    }
    Pipeline::new(&cfg, c.out.as_deref())
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).map_or(0, |rd| {
        rd.flatten()
            .map(|e| if e.path().is_dir() { count_files(&e.path()) } else { 1 })
            .sum()
    })
}

fn execute(cmd: Command) -> Result<Value> {
    Ok(match cmd {
        Command::Gen(c) => {
            let p = pipeline(&c, None)?;
            let before = count_files(&p.out);
            let (ds, cached) = p.dataset()?;
            json!({
                "cached": cached,
                "dataset_dir": p.out.join("dataset"),
                "fingerprint": ds.fingerprint()?,
                "videos": ds.videos(),
                "pairs": ds.pair_count(),
                "observation_dim": ds.observation_dim(),
                "new_files": count_files(&p.out).saturating_sub(before),
            })
        }
        Command::Train { common, stage } => {
            let p = pipeline(&common, None)?;
            let (ds, _) = p.dataset()?;
            let (s1, cached1) = p.stage1(&ds)?;
            let (ck, cached) = if stage == 1 {
                (s1, cached1)
            } else {
                let (id, _) = p.estimate_id(&ds, &s1)?;
                p.stage2(&ds, &s1, id.id_used)?
            };
            json!({
                "stage": stage,
                "cached": cached,
                "latent_dim": ck.net.latent_dim(),
                "epochs_run": ck.curve.len(),
                "best_epoch": ck.best_epoch,
                "best_val": ck.curve[ck.best_epoch].val,
                "fingerprint": ck.fingerprint()?,
            })
        }
        Command::EstimateId(c) => {
            let p = pipeline(&c, None)?;
            let (ds, _) = p.dataset()?;
            let (s1, _) = p.stage1(&ds)?;
            let (id, cached) = p.estimate_id(&ds, &s1)?;
            json!({
                "cached": cached,
                "id_fractional": id.danco.id_fractional,
                "id_rounded": id.id_rounded,
                "id_used": id.id_used,
                "two_nn": id.two_nn,
                "grid": id.danco.grid,
                "kl_curve": id.danco.kl_curve,
                "points": id.points_used,
            })
        }
        Command::Extract { common, split } => {
            let p = pipeline(&common, split.as_ref())?;
            let (ds, _) = p.dataset()?;
            let (s1, _) = p.stage1(&ds)?;
            let (id, _) = p.estimate_id(&ds, &s1)?;
            let (s2, _) = p.stage2(&ds, &s1, id.id_used)?;
            let (lat, cached) = p.extract(&ds, &s1, &s2)?;
            json!({
                "cached": cached,
                "split": p.config.metrics.split,
                "videos": lat.iter().map(|l| l.video).collect::<Vec<_>>(),
                "latent_dim": id.id_used,
                "path": p.out.join(format!("latents_{}.tide", p.config.metrics.split)),
            })
        }
        Command::Symfit(c) => {
            let p = pipeline(&c, None)?;
            let (ds, _) = p.dataset()?;
            let (s1, _) = p.stage1(&ds)?;
            let (id, _) = p.estimate_id(&ds, &s1)?;
            let (s2, _) = p.stage2(&ds, &s1, id.id_used)?;
            let (lat, _) = p.extract(&ds, &s1, &s2)?;
            let (fits, cached) = p.symfit(&ds, &lat)?;
            json!({
                "cached": cached,
                "inputs": fits.inputs,
                "expressions": fits.selected.iter().map(|e| json!({
                    "expression": e.expression.to_string(),
                    "prefix": e.expression.to_prefix(),
                    "complexity": e.complexity,
                    "train_mse": e.mse,
                })).collect::<Vec<_>>(),
            })
        }
        Command::Metrics { common, split } => {
            let p = pipeline(&common, split.as_ref())?;
            let (ds, _) = p.dataset()?;
            let (s1, _) = p.stage1(&ds)?;
            let (id, _) = p.estimate_id(&ds, &s1)?;
            let (s2, _) = p.stage2(&ds, &s1, id.id_used)?;
            let (lat, _) = p.extract(&ds, &s1, &s2)?;
            let (fits, _) = p.symfit(&ds, &lat)?;
            let (m, cached) = p.metrics(&ds, &lat, &fits)?;
            let mut v = serde_json::to_value(m)?;
            v["cached"] = json!(cached);
            v
        }
        Command::Report { common, compare: other } => {
            let p = pipeline(&common, None)?;
            let (bundle, summary) = p.run()?;
            let mut v = json!({
                "metrics": bundle.metrics,
                "latents_csv": bundle.latents_csv,
                "phase_space_csv": bundle.phase_space_csv,
                "expressions": bundle.expressions,
                "cached_steps": summary.cached,
            });
            if let Some(path) = other {
                let cmp = compare(&bundle.report, &load_report(&path)?);
                let out = p.out.join("comparison.json");
                std::fs::write(&out, serde_json::to_string_pretty(&cmp)?)?;
                v["comparison"] = serde_json::to_value(cmp)?;
            }
            v
        }
        Command::Run(c) => {
            let p = pipeline(&c, None)?;
            let (bundle, summary) = p.run()?;
            json!({
                "metrics": bundle.metrics,
                "report": bundle.report,
                "cached_steps": summary.cached,
                "computed_steps": summary.computed,
            })
        }
    })
}

fn error_object(e: &Error) -> Value {
    let step = match e {
        Error::Step { step, .. } => Some(step.clone()),
        _ => None,
    };
    json!({ "error": e.kind(), "message": e.to_string(), "step": step })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            println!("{}", error_object(&e));
            ExitCode::FAILURE
        }
    }
}
