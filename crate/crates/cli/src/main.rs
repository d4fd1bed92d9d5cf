//! `sonocc`: simulate scans, train occupancy networks, extract and score meshes.

mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sonocc::config::{RunConfig, ScalarKind};
use sonocc::pipeline::{self, ModelKind, Target};
use sonocc::training::LossKind;
use sonocc::Error;

#[derive(Parser)]
#[command(name = "sonocc", version, about = "Ultrasound occupancy-network reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults to the selected preset.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Output directory for this run.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scalar: Option<ScalarArg>,
    /// Override any config field, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalarArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Compensated,
    Plain,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Acoustic,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Primary,
    Transfer,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated datasets and ground-truth meshes.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a dataset file.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out>/dataset.bin`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "acoustic")]
        model: ModelArg,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Fraction of labels kept per frame.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Defaults to `<out>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adapt a trained model to the transfer phantom.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/transfer_dataset.bin`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Defaults to `<out>/finetuned.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Extract a surface mesh (PLY or OBJ by extension).
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out>/model.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "primary")]
        target: TargetArg,
        #[arg(long)]
        resolution: Option<usize>,
        /// Defaults to `<out>/mesh.ply`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a mesh against a reference mesh.
    Evaluate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = sonocc::metrics::DEFAULT_SAMPLES)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this JSON file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the method comparison and write `ablation.csv`.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            RunConfig::from_toml(&text).map_err(|e| match e {
                Error::Format { message, .. } => Error::Format { path: path.clone(), message },
                other => other,
            })?
        }
        None => RunConfig::preset(&args.preset)?,
    };
    let mut cfg = overrides::apply(&base, &args.set)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = args.scalar {
        cfg.scalar = match s {
            ScalarArg::F32 => ScalarKind::F32,
            ScalarArg::F64 => ScalarKind::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(path: Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.unwrap_or_else(|| cfg.output_dir.join(name))
}

fn report(manifest: &pipeline::Manifest) {
    for (name, hash) in &manifest.outputs {
        println!("wrote {name} (sha256 {})", &hash[..16]);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg } => {
            let cfg = load_config(&cfg)?;
            report(&pipeline::cmd_simulate(&cfg)?);
        }
        Command::Train { cfg, dataset, model, loss, fraction, iterations, checkpoint } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(l) = loss {
                cfg.train.loss_kind = match l {
                    LossArg::Compensated => LossKind::AttenuationCompensated,
                    LossArg::Plain => LossKind::PlainBce,
                };
            }
            if let Some(f) = fraction {
                cfg.train.supervision_fraction = f;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let dataset = or_default(dataset, &cfg, pipeline::DATASET_FILE);
            let checkpoint = or_default(checkpoint, &cfg, "model.json");
            let kind = match model {
                ModelArg::Acoustic => ModelKind::Acoustic,
                ModelArg::Baseline => ModelKind::Baseline,
            };
            let m = pipeline::cmd_train(&cfg, &dataset, kind, &checkpoint)?;
            println!("labels used: {} of {}", m.details["labels_used"], m.details["labels_available"]);
            report(&m);
        }
        Command::Finetune { cfg, checkpoint, dataset, fraction, iterations, output } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(f) = fraction {
                cfg.finetune.fraction = f;
            }
            if let Some(n) = iterations {
                cfg.finetune.iterations = n;
            }
            let checkpoint = or_default(checkpoint, &cfg, "model.json");
            let dataset = or_default(dataset, &cfg, pipeline::TRANSFER_DATASET_FILE);
            let output = or_default(output, &cfg, "finetuned.json");
            report(&pipeline::cmd_finetune(&cfg, &checkpoint, &dataset, &output)?);
        }
        Command::Extract { cfg, checkpoint, target, resolution, output } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(r) = resolution {
                cfg.extraction.resolution = r;
                cfg.validate()?;
            }
            let checkpoint = or_default(checkpoint, &cfg, "model.json");
            let output = or_default(output, &cfg, "mesh.ply");
            let target = match target {
                TargetArg::Primary => Target::Primary,
                TargetArg::Transfer => Target::Transfer,
            };
            report(&pipeline::cmd_extract(&cfg, &checkpoint, target, &output)?);
        }
        Command::Evaluate { mesh, gt, points, seed, json } => {
            let r = pipeline::cmd_evaluate(&mesh, &gt, points, seed)?;
            let text = serde_json::to_string_pretty(&r)?;
            println!("{text}");
            if let Some(path) = json {
                write_file(&path, &(text + "\n"))?;
            }
        }
        Command::Ablate { cfg } => {
            let cfg = load_config(&cfg)?;
            let r = pipeline::cmd_ablate(&cfg)?;
            print!("{}", r.to_csv());
            println!("wrote {}", cfg.output_dir.join(pipeline::ABLATION_FILE).display());
        }
        Command::Config { cfg } => {
            print!("{}", load_config(&cfg)?.to_toml()?);
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// 2: invalid configuration or arguments, 3: training diverged, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::InvalidArgument(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
