use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use semcons::model::ModelError;
use semcons_cli::config::{ConfigError, ExperimentConfig};
use semcons_cli::data::{self, DataError};
use semcons_cli::experiment;

#[derive(Parser)]
#[command(name = "semcons", version, about = "Toy semantics-preserving image translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (and the data seed for generate-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from (train) or to translate with (infer).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train both branches; writes checkpoints and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Translate every PNG in a directory.
    Infer {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted images against references and label maps.
    Eval {
        pred: PathBuf,
        truth: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep lambda_ts over seeds and tabulate semantic consistency.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn data_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    cfg.resolve_data_dir(common.config.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data_seed = seed;
            }
            let dir = common.out.clone().unwrap_or_else(|| data_dir(&common, &cfg));
            let manifest = data::generate(&cfg.dataset(), &dir)?;
            println!(
                "wrote {} source, {} target and {} eval images to {}",
                manifest.source.len(),
                manifest.target.len(),
                manifest.eval_images.len(),
                dir.display()
            );
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let data = data_dir(&common, &cfg);
            experiment::ensure_dataset(&cfg.dataset(), &data)?;
            let out = out_dir(&common, "runs/train");
            let done = experiment::train(&cfg, &data, &out, common.checkpoint.as_deref())?;
            if let Some(r) = done.last {
                println!("step {}: total_g {:.4} total_d {:.4}", r.step, r.total_generator(), r.values()[11]);
            }
            println!("final checkpoint {}", done.final_checkpoint.display());
        }
        Command::Infer { input, common } => {
            let ckpt = common.checkpoint.clone().context("infer needs --checkpoint")?;
            let cfg = match &common.config {
                Some(_) => load_config(&common)?,
                None => archived_config(&ckpt)?,
            };
            let written = experiment::infer(&cfg, &ckpt, &input, &out_dir(&common, "runs/infer"))?;
            println!("translated {} images", written.len());
        }
        Command::Eval { pred, truth, common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "runs/eval");
            let mean = experiment::eval(&cfg, &pred, &truth, &out)?;
            for m in &mean.metrics {
                println!("{} {:.6}", m.name, m.value);
            }
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let data = data_dir(&common, &cfg);
            let table = experiment::ablate(&cfg, &data, &out_dir(&common, "runs/ablate"))?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

/// The config a training run archived next to its checkpoints.
fn archived_config(ckpt: &Path) -> Result<ExperimentConfig> {
    let run_dir = ckpt.parent().context("checkpoint path has no parent")?;
    for dir in [run_dir, run_dir.parent().unwrap_or(run_dir)] {
        let p = dir.join(experiment::ARCHIVED_CONFIG);
        if p.exists() {
            return Ok(ExperimentConfig::load(&p)?);
        }
    }
    anyhow::bail!("no --config given and no archived config.toml next to {}", ckpt.display())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return match m {
                ModelError::Divergence { .. } => "divergence",
                ModelError::Config(_) => "config",
                _ => "model",
            };
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
