use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mgrelax::bench::{self, ExperimentConfig, GenerateSection, SweepSection};
use mgrelax::optimizer::SmootherFamily;
use mgrelax::par::{self, Execution};

/// Learned relaxation parameters for multigrid on random diffusion problems.
#[derive(Debug, Parser)]
#[command(name = "mgrelax", version)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn smoother parameters from the `[train]` section.
    Train {
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score the `[[smoothers]]` list on the `[protocol]` ensemble.
    Bench,
    /// Rate per omega on the `[protocol]` ensemble.
    Sweep {
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Per-sample spectral radius and Gelfand values from `[spectrum]`.
    Spectrum,
    /// Write diffusivity fields and their operators.
    Generate {
        /// Grid size when no config is given.
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config <path> is required for this command")?;
    let mut config =
        ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn execution(threads: Option<usize>) -> Result<Execution> {
    match threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            if !par::set_threads(n) {
                eprintln!("warning: thread count not applied (pool already running or built without parallelism)");
            }
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = execution(cli.threads)?;
    match &cli.command {
        Command::Train { max_epochs } => {
            let mut config = load(&cli)?;
            if let (Some(n), Some(train)) = (max_epochs, config.train.as_mut()) {
                train.max_epochs = *n;
            }
            let report = bench::run_train(&config, &cli.out, exec)?;
            let o = &report.outcome;
            println!("theta* = {:?} (epoch {}, val loss {:.6e})", o.theta.as_slice(), o.best_epoch, o.best_val_loss);
            if let (Some(t), Some(r)) = (&report.refined, report.refined_rate) {
                println!("refined = {t:?} (rate {r:.4})");
            }
        }
        Command::Bench => {
            let report = bench::run_bench(&load(&cli)?, &cli.out, exec)?;
            print!("{}", report.table());
        }
        Command::Sweep { lo, hi, step } => {
            let mut config = load(&cli)?;
            let base = config.sweep.clone();
            let pick = |v: Option<f64>, d: Option<f64>, key: &str| {
                v.or(d).with_context(|| format!("missing key `sweep.{key}`"))
            };
            config.sweep = Some(SweepSection {
                family: base.as_ref().map_or(SmootherFamily::Jacobi, |s| s.family),
                lo: pick(*lo, base.as_ref().map(|s| s.lo), "lo")?,
                hi: pick(*hi, base.as_ref().map(|s| s.hi), "hi")?,
                step: pick(*step, base.as_ref().map(|s| s.step), "step")?,
            });
            let report = bench::run_sweep(&config, &cli.out, exec)?;
            print!("{}", report.table());
        }
        Command::Spectrum => {
            let report = bench::run_spectrum(&load(&cli)?, &cli.out, exec)?;
            print!("{}", report.table());
        }
        Command::Generate { m, count, delta } => {
            let mut config = match &cli.config {
                Some(_) => load(&cli)?,
                None => ExperimentConfig::parse(&format!("seed = {}\n[ensemble]\nm = {m}\n", cli.seed.unwrap_or(0)))?,
            };
            let mut section = config.generate.clone().unwrap_or(GenerateSection {
                count: 1,
                first: 0,
                delta: 0.0,
            });
            if let Some(c) = count {
                section.count = *c;
            }
            if let Some(d) = delta {
                section.delta = *d;
            }
            config.generate = Some(section);
            for path in bench::run_generate(&config, &cli.out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
