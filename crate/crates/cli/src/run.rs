//! Dispatches the (tolerance, repetition) sweep and writes the result files.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mldl_core::dlmc::EstimatorResult;
use mldl_core::forward_models::Experiment;
use mldl_core::mldlmc::{dlmc_at_tol, mldlmc_estimate, pilot_run, MldlmcConfig, PilotConfig, PilotEstimates};
use mldl_core::mldlsc::{mldlsc_estimate, MldlscConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EstimatorKind, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Record {
    pub tol: f64,
    pub repetition: usize,
    pub result: EstimatorResult,
}

#[derive(Debug, Serialize)]
struct ResultsFile<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    reference: Option<f64>,
    records: &'a [Record],
}

#[derive(Debug, Serialize)]
struct Metadata {
    schema_version: u32,
    version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    workers: usize,
    wall_seconds: f64,
    record_wall_seconds: Vec<f64>,
}

/// Seed of repetition `r`; pilots use the same seed.
fn repetition_seed(cfg: &RunConfig, r: usize) -> u64 {
    cfg.seed.wrapping_add(r as u64)
}

fn pilot_for(cfg: &RunConfig, exp: &Experiment, r: usize) -> mldl_core::Result<PilotEstimates> {
    pilot_run(
        exp,
        &PilotConfig {
            seed: repetition_seed(cfg, r),
            ..cfg.pilot.clone()
        },
    )
}

fn run_one(
    cfg: &RunConfig,
    exp: &Experiment,
    pilot: Option<&PilotEstimates>,
    tol: f64,
    r: usize,
) -> mldl_core::Result<EstimatorResult> {
    let ml = MldlmcConfig {
        tol,
        alpha: cfg.alpha,
        seed: repetition_seed(cfg, r),
        m_policy: cfg.m_policy,
        pilot: cfg.pilot.clone(),
        ..MldlmcConfig::new(tol, 0)
    };
    match cfg.estimator {
        EstimatorKind::Dlmc => dlmc_at_tol(exp, &ml, false, pilot),
        EstimatorKind::Dlmcis => dlmc_at_tol(exp, &ml, true, pilot),
        EstimatorKind::Mldlmc => mldlmc_estimate(exp, &ml, pilot),
        EstimatorKind::Mldlsc => mldlsc_estimate(
            exp,
            &MldlscConfig {
                tol,
                beta2: cfg.mldlsc.beta2.clone(),
                max_beta: cfg.mldlsc.max_beta,
                max_work: cfg.mldlsc.max_work,
            },
        ),
    }
}

/// Every `(tol, repetition)` pair, in tolerance-major order.
pub fn sweep(cfg: &RunConfig) -> mldl_core::Result<Vec<Record>> {
    let exp = cfg.experiment().map_err(|e| mldl_core::Error::Config(e.0))?;
    let pilots: Vec<Option<PilotEstimates>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| cfg.estimator.needs_pilot().then(|| pilot_for(cfg, &exp, r)).transpose())
        .collect::<mldl_core::Result<_>>()?;
    let jobs: Vec<(f64, usize)> = cfg
        .tol_list
        .iter()
        .flat_map(|&t| (0..cfg.repetitions).map(move |r| (t, r)))
        .collect();
    jobs.into_par_iter()
        .map(|(tol, r)| {
            Ok(Record {
                tol,
                repetition: r,
                result: run_one(cfg, &exp, pilots[r].as_ref(), tol, r)?,
            })
        })
        .collect()
}

/// Pilot estimates of every repetition, for the `rates` command.
pub fn rates(cfg: &RunConfig) -> mldl_core::Result<Vec<PilotEstimates>> {
    let exp = cfg.experiment().map_err(|e| mldl_core::Error::Config(e.0))?;
    (0..cfg.repetitions).map(|r| pilot_for(cfg, &exp, r)).collect()
}

fn csv_writer(dir: &Path, name: &str) -> std::io::Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(dir.join(name))?))
}

fn io_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

pub fn write_tables(dir: &Path, reference: Option<f64>, records: &[Record]) -> std::io::Result<()> {
    let mut err = csv_writer(dir, "error_vs_tol.csv")?;
    err.write_record([
        "tol",
        "repetition",
        "value",
        "stat_error",
        "bias_est",
        "reference",
        "abs_error",
        "within_tol",
    ])
    .map_err(io_err)?;
    let mut decay = csv_writer(dir, "level_decay.csv")?;
    decay
        .write_record(["tol", "repetition", "level", "samples", "inner", "E_l", "V_l", "work"])
        .map_err(io_err)?;
    let mut work = csv_writer(dir, "work_vs_tol.csv")?;
    work.write_record(["tol", "repetition", "total_work", "wall_seconds"])
        .map_err(io_err)?;
    let mut levels = csv_writer(dir, "L_vs_tol.csv")?;
    levels
        .write_record(["tol", "repetition", "L", "kappa", "M_L"])
        .map_err(io_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for rec in records {
        let r = &rec.result;
        let (t, rep) = (rec.tol.to_string(), rec.repetition.to_string());
        let abs = reference.map(|x| (r.value - x).abs());
        err.write_record([
            t.clone(),
            rep.clone(),
            r.value.to_string(),
            r.stat_error.to_string(),
            r.bias_est.to_string(),
            opt(reference),
            opt(abs),
            abs.map_or(String::new(), |a| (a <= rec.tol).to_string()),
        ])
        .map_err(io_err)?;
        for l in &r.per_level {
            decay
                .write_record([
                    t.clone(),
                    rep.clone(),
                    l.level.to_string(),
                    l.samples.to_string(),
                    l.inner.to_string(),
                    l.mean.to_string(),
                    l.variance.to_string(),
                    l.work.to_string(),
                ])
                .map_err(io_err)?;
        }
        work.write_record([
            t.clone(),
            rep.clone(),
            r.total_work.to_string(),
            r.wall_time.to_string(),
        ])
        .map_err(io_err)?;
        let m_l = r.per_level.last().map_or(0, |l| l.inner);
        levels
            .write_record([t, rep, r.finest_level().to_string(), opt(r.kappa), m_l.to_string()])
            .map_err(io_err)?;
    }
    for w in [&mut err, &mut decay, &mut work, &mut levels] {
        w.flush()?;
    }
    Ok(())
}

/// Runs the sweep and writes `results.json`, `metadata.json` and the CSV
/// tables. Timing goes to the metadata so results stay reproducible.
pub fn run_and_write(cfg: &RunConfig) -> Result<Vec<Record>, crate::Failure> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let records = sweep(cfg).map_err(crate::Failure::from_core)?;
    let reference = cfg.reference_value();
    let dir = &cfg.output_dir;
    let io = |e: std::io::Error| crate::Failure::io(dir, e);
    fs::create_dir_all(dir).map_err(io)?;
    let results = ResultsFile {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        reference,
        records: &records,
    };
    let json = serde_json::to_string_pretty(&results).map_err(|e| io(std::io::Error::other(e)))?;
    fs::write(dir.join("results.json"), json + "\n").map_err(io)?;
    write_tables(dir, reference, &records).map_err(io)?;
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: unix(started),
        finished_unix: unix(SystemTime::now()),
        workers: rayon::current_num_threads(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        record_wall_seconds: records.iter().map(|r| r.result.wall_time).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| io(std::io::Error::other(e)))?;
    fs::write(dir.join("metadata.json"), json + "\n").map_err(io)?;
    Ok(records)
}
