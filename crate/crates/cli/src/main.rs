use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fedflow_core::experiment::{
    run_bench, run_in_process, serve_client, write_artifacts, BenchMatrix, ExperimentConfig, ExperimentError, Mode,
};
use fedflow_core::transport::TcpEndpoint;
use fedflow_core::workflows::WorkflowError;
use tracing::{error, info, warn};
use tracing_subscriber::EnvFilter;

mod multiprocess;

/// Overrides `output_dir` of every run.
const OUTPUT_ENV: &str = "FEDFLOW_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "fedflow", version, about = "Federated segmentation experiments over several workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    InProcess,
    MultiProcess,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Check the configuration and exit.
        #[arg(long)]
        validate_only: bool,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a matrix of cells with repeats and print the comparison tables.
    Bench {
        matrix: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Run despite an epoch budget mismatch.
        #[arg(long)]
        force: bool,
    },
    /// Check a configuration and print the resolved form.
    Validate { config: PathBuf },
    /// Serve as a client of a remote coordinator.
    Client {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        id: String,
        /// Local listen address for peer traffic.
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
        /// Seconds to wait for the coordinator.
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Category code of a failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    let workflow = |w: &WorkflowError| match w {
        WorkflowError::InvalidConfig { .. } => 2,
        WorkflowError::ClientTimeout { .. } | WorkflowError::CoordinatorTimeout => 5,
        WorkflowError::Transport(_) => 6,
        _ => 4,
    };
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<ExperimentError>() {
            return match x {
                ExperimentError::ConfigInvalid { .. } => 2,
                ExperimentError::BudgetMismatch(_) => 3,
                ExperimentError::Workflow(w) => workflow(w),
                ExperimentError::Transport(_) | ExperimentError::Io { .. } => 6,
                _ => 4,
            };
        }
        if let Some(w) = cause.downcast_ref::<WorkflowError>() {
            return workflow(w);
        }
    }
    1
}

fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from)).unwrap_or_else(|| cfg.output_dir.clone())
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load_checked(path).with_context(|| format!("loading {}", path.display()))
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, validate_only, mode, output } => {
            let mut cfg = load(&config)?;
            if validate_only {
                println!("{}: ok", config.display());
                return Ok(ExitCode::SUCCESS);
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::InProcess => Mode::InProcess,
                    ModeArg::MultiProcess => Mode::MultiProcess,
                };
            }
            cfg.output_dir = output_dir(&cfg, output);
            let out = match cfg.mode {
                Mode::InProcess => run_in_process(&cfg)?,
                Mode::MultiProcess => multiprocess::run(&cfg)?,
            };
            let summary = write_artifacts(&cfg, &out, &cfg.output_dir)?;
            println!("{}", out.ledger.report(cfg.name.as_deref().unwrap_or("run")));
            if let Some(o) = &summary.overall {
                println!(
                    "final model: mACC {:.2}%  mwP {:.2}%  mwF1 {:.2}%  mwIoU {:.2}%",
                    o.macc * 100.0,
                    o.mwp * 100.0,
                    o.mwf1 * 100.0,
                    o.mwiou * 100.0
                );
            }
            println!("artifacts in {}", cfg.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { matrix, json, force } => {
            let mut m = BenchMatrix::load(&matrix).with_context(|| format!("loading {}", matrix.display()))?;
            m.force |= force;
            let report = run_bench(&m)?;
            print!("{}", report.table());
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if report.any_failed() {
                warn!("some bench runs failed");
                return Ok(ExitCode::from(4));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            if let Some(w) = cfg.budget_warning()? {
                eprintln!("warning: {w}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Client { connect, id, bind, timeout } => {
            let ep = TcpEndpoint::bind(&id, bind.as_str()).with_context(|| format!("binding {bind}"))?;
            info!(client = %id, addr = %ep.local_addr(), coordinator = %connect, "client starting");
            serve_client(&ep, Some(&connect), Duration::from_secs_f64(timeout))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
