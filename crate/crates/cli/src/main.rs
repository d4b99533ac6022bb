//! `mldl`: configuration-driven runner for the EIG estimators.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;

/// Environment variable holding the worker count.
const WORKERS_ENV: &str = "MLDL_WORKERS";

#[derive(Parser)]
#[command(
    name = "mldl",
    version,
    about = "Expected information gain by multilevel double-loop estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tolerance sweep and write results and tables.
    Run { config: PathBuf },
    /// Parse and check a configuration without running it.
    Validate { config: PathBuf },
    /// Pilot runs only: print C1, C2, eta_w, eta_s and gamma estimates.
    Rates { config: PathBuf },
}

/// A diagnostic line and an exit status.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn from_core(e: mldl_core::Error) -> Self {
        use mldl_core::Error as E;
        let code = match e {
            E::Config(_) => 2,
            E::Resource(_) | E::LevelOutOfRange { .. } | E::TooManyRejections { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

#[derive(Serialize)]
struct RateLine {
    repetition: usize,
    c1: f64,
    c2: f64,
    eta_w: f64,
    eta_s: f64,
    gamma: Option<f64>,
    degenerate: bool,
}

fn configure_workers() -> Result<(), Failure> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::config(format!("{WORKERS_ENV}: expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("{WORKERS_ENV}: {e}")))
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    configure_workers()?;
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: {:?} on {} tolerances x {} repetitions -> {}",
                cfg.estimator,
                cfg.tol_list.len(),
                cfg.repetitions,
                cfg.output_dir.display()
            );
        }
        Command::Run { config } => {
            let cfg = load(&config)?;
            let records = run::run_and_write(&cfg)?;
            for r in &records {
                println!(
                    "tol {} rep {}: {} = {:.6} (stat {:.2e}, L {}, work {:.3e})",
                    r.tol,
                    r.repetition,
                    r.result.estimator,
                    r.result.value,
                    r.result.stat_error,
                    r.result.finest_level(),
                    r.result.total_work
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Rates { config } => {
            let cfg = load(&config)?;
            let pilots = run::rates(&cfg).map_err(Failure::from_core)?;
            let lines: Vec<RateLine> = pilots
                .iter()
                .enumerate()
                .map(|(r, p)| RateLine {
                    repetition: r,
                    c1: p.c1,
                    c2: p.c2,
                    eta_w: p.eta_w,
                    eta_s: p.eta_s,
                    gamma: p.gamma_hat,
                    degenerate: p.degenerate,
                })
                .collect();
            for l in &lines {
                println!(
                    "rep {}: C1 {:.4e} C2 {:.4e} eta_w {:.3} eta_s {:.3} gamma {}",
                    l.repetition,
                    l.c1,
                    l.c2,
                    l.eta_w,
                    l.eta_s,
                    l.gamma.map_or("n/a".into(), |g| format!("{g:.3}"))
                );
            }
            let dir = &cfg.output_dir;
            std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
            let json = serde_json::json!({ "schema_version": run::SCHEMA_VERSION, "pilots": pilots });
            std::fs::write(dir.join("rates.json"), format!("{json:#}\n")).map_err(|e| Failure::io(dir, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
