use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ctlio::{cmd_eval, cmd_run, cmd_simulate, load_config, load_scenario, DEFAULT_DELTA};
use ctlio_core::config::Mode;

#[derive(Parser)]
#[command(name = "ctlio", version, about = "Multi-LiDAR inertial odometry with a synthetic test bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Simulate {
        /// preset name or scenario JSON file
        #[arg(default_value = "corridor")]
        scenario: String,
        /// scenario JSON file; takes precedence over the positional argument
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Run odometry over a dataset directory
    Run {
        dataset: PathBuf,
        /// run config JSON; `CTLIO_*` environment variables override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        /// accepted for symmetry with `simulate`; the pipeline is deterministic
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare an estimated trajectory with ground truth
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        /// segment length for relative errors (m)
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate { scenario, config, seed, out } => {
            let source = config.map_or(scenario, |p| p.display().to_string());
            let mut s = load_scenario(&source)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let summary = cmd_simulate(&s, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Run { dataset, config, mode, seed, out } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            if seed.is_some() {
                log::info!("--seed has no effect on a run");
            }
            let outcome = cmd_run(&dataset, &cfg, Some(&out))?;
            log::info!("{} frames, map of {} points", outcome.trajectory.len(), outcome.map_size);
            if let Some(m) = outcome.metrics {
                println!("{}", serde_json::to_string_pretty(&m)?);
            }
        }
        Command::Eval { estimate, truth, delta, out } => {
            let m = cmd_eval(&estimate, &truth, delta, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}
