use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use usod_core::metrics::evaluate_dataset;
use usod_core::pipeline::train::latest_checkpoint;
use usod_core::pipeline::{
    ablate, export_pseudo_labels, infer, load_checkpoint, train, AblationGrid, Dataset, Model, TrainConfig, TrainOptions,
};
use usod_core::Scalar;

#[derive(Parser)]
#[command(name = "usod", version, about = "Unsupervised salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written with a different config.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides both the config file and `USOD_SEED`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Write location, detailed and suppressed labels for the training images.
    PseudoLabel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the latest checkpoint under the config's output directory.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Predict saliency maps for a directory of images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Where to write eval.tsv and eval.json; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score one model per row of a loss and θ_r grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run_train<T: Scalar>(config: &TrainConfig, options: &TrainOptions) -> Result<()> {
    let run = train::<T>(config, options)?;
    match run.log.last() {
        Some(row) => println!("trained {} steps, last total loss {:.6}", run.progress.step, row.total),
        None => println!("no training steps run"),
    }
    println!("checkpoint: {}", run.checkpoint.display());
    Ok(())
}

fn run_pseudo_label<T: Scalar>(config: TrainConfig, ckpt: Option<PathBuf>, out: &Path) -> Result<()> {
    let dataset = Dataset::open(&config.data.train_dir)?;
    let ckpt = ckpt.or_else(|| Some(latest_checkpoint(&config.output_dir)).filter(|p| p.is_file()));
    let model = match ckpt {
        Some(path) => {
            let mut model = load_checkpoint::<T>(&path)?.model;
            model.config.data = config.data.clone();
            model
        }
        None => {
            log::warn!("no checkpoint found under {}; labelling with an untrained model", config.output_dir.display());
            Model::<T>::new(config)?
        }
    };
    let n = export_pseudo_labels(&model, &dataset, out)?;
    println!("wrote labels for {n} images to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, force, epochs, seed, output_dir, precision } => {
            let mut cfg = load_config(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            cfg.validate()?;
            let options = TrainOptions { resume, force };
            match precision {
                Precision::F32 => run_train::<f32>(&cfg, &options),
                Precision::F64 => run_train::<f64>(&cfg, &options),
            }
        }
        Command::PseudoLabel { config, out, ckpt, precision } => {
            let cfg = load_config(&config)?;
            match precision {
                Precision::F32 => run_pseudo_label::<f32>(cfg, ckpt, &out),
                Precision::F64 => run_pseudo_label::<f64>(cfg, ckpt, &out),
            }
        }
        Command::Infer { ckpt, input, out, precision } => {
            let n = match precision {
                Precision::F32 => infer::<f32>(&ckpt, &input, &out)?,
                Precision::F64 => infer::<f64>(&ckpt, &input, &out)?,
            };
            if n == 0 {
                bail!("no images found in {}", input.display());
            }
            println!("wrote {n} maps to {}", out.display());
            Ok(())
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate_dataset(&pred, &gt)?;
            for e in &report.errors {
                log::warn!("{e}");
            }
            report.write(out.as_deref().unwrap_or(&pred))?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Ablate { config, grid, precision } => {
            let cfg = load_config(&config)?;
            let grid = AblationGrid::load(&grid)?;
            let report = match precision {
                Precision::F32 => ablate::<f32>(&cfg, &grid)?,
                Precision::F64 => ablate::<f64>(&cfg, &grid)?,
            };
            print!("{}", report.to_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
