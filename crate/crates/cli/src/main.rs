use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use p2pgrid_core::config::{ConfigError, RunConfig};
use p2pgrid_core::sim::{self, SimError};

#[derive(Parser)]
#[command(name = "p2pgrid", version, about = "Multi-microgrid P2P electricity market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to the reference run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Clearing mechanism: jpq, greedy, mrda or vvda. Repeat for `compare`.
    #[arg(long)]
    mechanism: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes with scripted or trained agents.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Use the trained agents stored in this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the recurrent multi-agent learner.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run several mechanisms on identical scenarios.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a trajectory into plot-ready tables.
    Export {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value = "tidy-csv")]
        format: String,
        /// Output file; defaults to `<trajectory>_tidy.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common, training: bool) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_env()?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.episodes {
        if training {
            cfg.learner.episodes = n;
        } else {
            cfg.episodes = n;
        }
    }
    match common.mechanism.as_slice() {
        [] => {}
        [one] => cfg.mechanism = one.clone(),
        many => cfg.mechanisms = many.to_vec(),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn export_path(trajectory: &Path) -> PathBuf {
    let stem = trajectory.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
    trajectory.with_file_name(format!("{stem}_tidy.csv"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { common, checkpoint } => {
            let cfg = load(&common, false)?;
            let out = sim::cmd_simulate(&cfg, cfg.episodes, &common.out, checkpoint.as_deref())?;
            let worst = out.metrics.iter().map(|m| m.max_balance_residual).fold(0.0, f64::max);
            println!(
                "simulated {} episodes with {}; wrote {} and {} (max balance residual {worst:e})",
                out.metrics.len(),
                cfg.mechanism,
                out.metrics_path.display(),
                out.trajectory_path.display()
            );
        }
        Command::Train { common, resume } => {
            let cfg = load(&common, true)?;
            let out = sim::cmd_train(&cfg, &common.out, resume.as_deref())?;
            let last = out.trainer.metrics.last().map(|m| m.community.reward).unwrap_or(f64::NAN);
            println!(
                "trained {} episodes ({} updates); last episode reward {last:.4}; wrote {}",
                out.manifest.episodes,
                out.trainer.update_count(),
                common.out.display()
            );
        }
        Command::Compare { common } => {
            let cfg = load(&common, false)?;
            let kinds = cfg.mechanism_kinds()?;
            let cmp = sim::cmd_compare(&cfg, &kinds, cfg.episodes, &common.out)?;
            println!("{:<8} {:>12} {:>14} {:>12} {:>12}", "mech", "reward", "emergency_kwh", "feedin_kwh", "storage_kwh");
            for r in &cmp.rows {
                let v = r.mean;
                println!(
                    "{:<8} {:>12.4} {:>14.4} {:>12.4} {:>12.4}",
                    r.mechanism.to_string(),
                    v.reward,
                    v.emergency_kwh,
                    v.feedin_kwh,
                    v.storage_kwh
                );
            }
        }
        Command::Export { trajectory, format, out } => {
            let out = out.unwrap_or_else(|| export_path(&trajectory));
            let rows = sim::cmd_export(&trajectory, &format, &out).with_context(|| format!("exporting {}", trajectory.display()))?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || c.downcast_ref::<SimError>().is_some_and(SimError::is_config)
    })
}
