use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dgcg::experiment::{run, synth, write_backprojections, ExperimentConfig, Overrides};
use dgcg::solver::Mode;

#[derive(Parser)]
#[command(
    name = "dgcg",
    version,
    about = "Sparse dynamic reconstruction from undersampled Fourier data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize data, reconstruct, and write artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Write the measurement data only.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write backprojection rasters at the given time indices.
    Backproject {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: dgcg::Error| e.to_string())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DGCG_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DGCG_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn load(config: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(o);
    Ok(cfg)
}

fn main_inner() -> Result<i32> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            mode,
        } => {
            let cfg = load(
                &config,
                &Overrides {
                    output_dir: out,
                    seed,
                    mode,
                },
            )?;
            let outcome = run(&cfg)?;
            let s = &outcome.summary;
            println!(
                "{}: {} after {} iterations, objective {:.6e}, gap {:.3e}, {} atoms -> {}",
                s.name,
                s.termination,
                s.iterations,
                s.final_objective,
                s.final_gap,
                s.atoms.len(),
                outcome.output_dir.display()
            );
            Ok(outcome.report.termination.exit_code())
        }
        Command::Synth { config, out } => {
            let cfg = load(
                &config,
                &Overrides {
                    output_dir: out,
                    ..Default::default()
                },
            )?;
            let dir = synth(&cfg)?;
            println!("data written to {}", dir.display());
            Ok(0)
        }
        Command::Backproject { config, times, out } => {
            let cfg = load(
                &config,
                &Overrides {
                    output_dir: out,
                    ..Default::default()
                },
            )?;
            if let Some(&i) = times.iter().find(|&&i| i > cfg.time_intervals) {
                anyhow::bail!(
                    "time index {i} exceeds the grid (T = {})",
                    cfg.time_intervals
                );
            }
            let problem = cfg.problem()?;
            for p in write_backprojections(&cfg, &problem, &cfg.output_dir(), &times)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
