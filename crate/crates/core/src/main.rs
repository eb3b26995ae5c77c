use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dama::data::{generate, read_mcs, write_mcs, SynthConfig};
use dama::eval::{ablate, evaluate, mask_trace, trace_csv, AblationGrid, EvalConfig, EvalMode};
use dama::train::{load_checkpoint, pretrain, resume, Outputs, TrainConfig, TrainState};
use dama::{DamaError, Result};

#[derive(Parser)]
#[command(name = "dama", version, about = "Dual-loss adaptive masked autoencoder for multi-channel cell images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Probe,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Gen {
        /// Generator settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain and write a checkpoint plus per-step metrics.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from the checkpoint at `--out` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classification accuracy of a checkpoint's encoder.
    Eval {
        /// Checkpoint; without it a randomly initialized encoder built from
        /// `--config` is evaluated.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, conflicts_with = "ckpt")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Probe)]
        mode: Mode,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Pretrain and evaluate every cell of a grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the grid's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Record first masks, patch losses and derived second masks.
    MaskTrace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| DamaError::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| DamaError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DamaError::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, n, seed } => {
            let mut cfg: SynthConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let images = generate(&cfg, n)?;
            write_mcs(&out, &images)?;
            eprintln!("wrote {n} images to {}", out.display());
        }
        Command::Pretrain { config, data, out, metrics, resume: cont, seed } => {
            let images = read_mcs(&data)?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            let outputs = Outputs { checkpoint: Some(out.clone()), metrics: Some(metrics.clone()) };
            let state = if cont && out.exists() {
                let mut state = load_checkpoint(&out)?;
                eprintln!("resuming at step {}", state.step);
                resume(&mut state, &images, &outputs)?;
                state
            } else {
                let mut cfg: TrainConfig = read_json(config.as_deref())?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                pretrain(&cfg, &images, &outputs)?
            };
            let last = state.metrics.last().map_or(f64::NAN, |r| r.total);
            eprintln!(
                "trained {} steps, final L_total {last:.5}; checkpoint {} metrics {}",
                state.step,
                out.display(),
                metrics.display()
            );
        }
        Command::Eval { ckpt, config, data, mode, fraction, folds, epochs, lr, seed, json } => {
            let images = read_mcs(&data)?;
            let (vit, encoder) = match ckpt {
                Some(path) => {
                    let s = load_checkpoint(&path)?;
                    (s.vit, s.branch1)
                }
                None => {
                    let mut cfg: TrainConfig = read_json(config.as_deref())?;
                    cfg.seed = seed;
                    cfg.resolve_input_stats(&images)?;
                    let s = TrainState::new(cfg)?;
                    (s.vit, s.branch1)
                }
            };
            let cfg = EvalConfig {
                mode: match mode {
                    Mode::Probe => EvalMode::LinearProbe,
                    Mode::Finetune => EvalMode::Finetune,
                },
                fraction,
                folds,
                epochs,
                lr,
                seed,
                ..EvalConfig::default()
            };
            let report = evaluate(&vit, &encoder, &images, &cfg)?;
            for (i, a) in report.accuracies.iter().enumerate() {
                println!("fold {i}: {a:.4}");
            }
            println!("accuracy {:.4} ± {:.4} over {} folds", report.mean, report.std, report.accuracies.len());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                write(&path, &text)?;
            }
        }
        Command::Ablate { grid, data, out, seed } => {
            let images = read_mcs(&data)?;
            let mut grid: AblationGrid = read_json(Some(&grid))?;
            if let Some(s) = seed {
                grid.seeds = vec![s];
            }
            let result = ablate(&grid, &images, |m| eprintln!("{m}"))?;
            write(&out, &result.csv())?;
            eprintln!("{} rows, {} skipped", result.rows.len(), result.skipped.len());
        }
        Command::MaskTrace { ckpt, data, steps, out, seed } => {
            let state = load_checkpoint(&ckpt)?;
            let images = read_mcs(&data)?;
            let (_, rows) = mask_trace(&state, &images, steps, seed)?;
            write(&out, &trace_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
