use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use log::info;

use vilo_core::factor_graph::EstimatorMode;
use vilo_core::harness::check::{self, CheckOptions};
use vilo_core::harness::{self, load_dataset, metrics, save_dataset, RunConfig};
use vilo_core::simulator::simulate;

/// Visual-inertial-leg odometry with online calf-length calibration.
///
/// Log verbosity follows RUST_LOG (default: warn).
#[derive(Parser)]
#[command(name = "vilo", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trot and write a dataset.
    Sim {
        /// Run configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides sim.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one estimator over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// kf, vio, vilo or vilo-calib.
        #[arg(long, value_parser = parse_mode)]
        mode: EstimatorMode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run all four estimators over a dataset and tabulate their errors.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check analytic derivatives and covariances against numeric oracles.
    Check {
        /// Random instances per derivative check.
        #[arg(long, default_value_t = CheckOptions::default().instances)]
        instances: usize,
        /// Monte-Carlo draws per covariance check.
        #[arg(long, default_value_t = CheckOptions::default().draws)]
        draws: usize,
        #[arg(long, default_value_t = CheckOptions::default().seed)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<EstimatorMode, String> {
    s.parse().map_err(|e: vilo_core::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> vilo_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cmd: Command) -> vilo_core::Result<bool> {
    match cmd {
        Command::Sim { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            cfg.sim = cfg.sim.resolved()?;
            let (truth, data) = simulate(&cfg.sim)?;
            save_dataset(&data, &out)?;
            let dump = out.with_extension("toml");
            std::fs::write(&dump, cfg.to_toml()).map_err(|e| vilo_core::Error::Io {
                path: dump.clone(),
                source: e,
            })?;
            println!(
                "wrote {} ({:.1} s, {:.2} m path, {} camera frames, {} slips); config in {}",
                out.display(),
                data.duration(),
                truth.path_length,
                data.cam.len(),
                truth.slips.len(),
                dump.display()
            );
            Ok(true)
        }
        Command::Run {
            dataset,
            mode,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&dataset)?;
            info!("running {mode} on {}", dataset.display());
            let s = harness::run_to_dir(&data, &[mode], &cfg, &out)?;
            print!("{}", metrics::format_table(&s.metrics, Some(&s.timing)));
            Ok(true)
        }
        Command::Compare { dataset, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&dataset)?;
            let s = harness::run_to_dir(&data, &EstimatorMode::ALL, &cfg, &out)?;
            print!("{}", metrics::format_table(&s.metrics, Some(&s.timing)));
            Ok(true)
        }
        Command::Check { instances, draws, seed } => {
            let o = CheckOptions {
                instances,
                draws,
                seed,
                ..CheckOptions::default()
            };
            let results = check::run_all(&o)?;
            for r in &results {
                println!(
                    "{} {:<46} cases {:>6}  worst {:.2e}  tol {}  {:.1} s",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.cases,
                    r.worst,
                    r.tolerance,
                    r.seconds
                );
            }
            Ok(results.iter().all(|r| r.passed()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
