use anyhow::Result;
use clap::{Parser, Subcommand};
use lflex_cli::commands::{self, SampleArgs, Sizes, TrainArgs};
use lflex_core::sampler::SamplerConfig;
use lflex_model::train::RunOptions;
use lflex_model::{ModelError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Worker thread count for the data-parallel paths.
const THREADS_ENV: &str = "LFLEX_THREADS";

#[derive(Parser)]
#[command(
    name = "lflex",
    version,
    about = "Variable-length masked flow matching with learned schedules"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate star-graph train/test sets and the vocabulary sidecar.
    GenData {
        /// Read the preset from this run config instead of --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "medium")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config; writes checkpoint.bin and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from <out>/checkpoint.bin when present.
        #[arg(long)]
        resume: bool,
        /// Record real step durations in metrics.csv.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Generate answers for every prompt in a dataset file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-step trajectories here.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        nucleus_p: f64,
        #[arg(long)]
        confidence: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the first N prompts (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Score generations against a dataset file.
    Eval {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the metrics as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle suites; exits 1 if any check fails.
    Verify {
        /// all, kfe, quad, reduction, order, grads, reinforce, projected, kl or sampler
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn setup_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV}={v} is not a thread count"))?;
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    setup_threads()?;
    match cli.cmd {
        Cmd::GenData {
            config,
            preset,
            seed,
            train_size,
            test_size,
            out,
        } => {
            let preset = match config {
                Some(p) => RunConfig::load(&p)?.task.preset,
                None => preset,
            };
            let sizes = Sizes {
                train: train_size,
                test: test_size,
            };
            commands::gen_data(&preset, seed, sizes, &out)?;
        }
        Cmd::Train {
            config,
            out,
            seed,
            steps,
            resume,
            timing,
            quiet,
        } => {
            let args = TrainArgs {
                seed,
                steps,
                resume,
                opts: RunOptions {
                    timing,
                    verbose: !quiet,
                },
            };
            let ck = commands::train(&config, &out, &args)?;
            eprintln!("checkpoint written to {}", ck.display());
        }
        Cmd::Sample {
            checkpoint,
            prompts,
            out,
            trajectories,
            steps,
            nucleus_p,
            confidence,
            seed,
            limit,
        } => {
            let args = SampleArgs {
                sampler: SamplerConfig {
                    steps,
                    nucleus_p,
                    confidence,
                    ..SamplerConfig::default()
                },
                seed,
                limit,
                trajectories,
            };
            commands::sample(&checkpoint, &prompts, &out, &args)?;
        }
        Cmd::Eval {
            generations,
            dataset,
            out,
        } => {
            let r = commands::eval(&generations, &dataset, out.as_deref())?;
            println!("{}", r.summary());
        }
        Cmd::Verify { suite } => return verify(&suite),
    }
    Ok(true)
}

#[cfg(feature = "verify")]
fn verify(suite: &str) -> Result<bool> {
    let checks = lflex_cli::verify::run_suite(suite).ok_or_else(|| {
        ModelError::Config(format!(
            "unknown suite {suite}; choose all or one of {}",
            lflex_cli::verify::SUITES.join(", ")
        ))
    })?;
    let mut ok = true;
    for c in &checks {
        println!("{}", c.line());
        ok &= c.passed;
    }
    Ok(ok)
}

#[cfg(not(feature = "verify"))]
fn verify(_suite: &str) -> Result<bool> {
    Err(ModelError::Config("built without the verify feature".into()).into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<ModelError>()
                .is_some_and(|m| matches!(m, ModelError::Config(_)))
                || e.downcast_ref::<lflex_core::CoreError>()
                    .is_some_and(|c| matches!(c, lflex_core::CoreError::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
