//! Pilot runs: two coupled passes with `M = 1` and `M = 10` on identical
//! outer samples, from which the bias constants and rates are fitted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{sample_level, RateConstants};
use crate::error::{Error, Result};
use crate::forward_models::{work_of_counts, Evaluator, Experiment, MeshHierarchy};
use crate::rng::{substream, StreamKind};
use crate::stats::{linear_fit, OnlineStats};

const PILOT_INNER: [usize; 2] = [1, 10];
/// Standard errors a level mean must clear to enter the `|E_ℓ|` fit.
const SIGNIFICANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    /// Finest pilot level (clamped to the model's maximum).
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Outer samples per level.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_levels() -> usize {
    5
}

fn default_samples() -> usize {
    5
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            samples: default_samples(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotEstimates {
    pub levels: usize,
    pub samples: usize,
    pub c1: f64,
    pub c2: f64,
    /// `V₀ ≈ C₃ + C₄/M`; diagnostics only.
    pub c3: f64,
    pub c4: f64,
    pub eta_w: f64,
    pub eta_s: f64,
    /// Work exponent fitted from wall-clock time per evaluation.
    pub gamma_hat: Option<f64>,
    /// Every level difference vanished identically.
    pub degenerate: bool,
    /// Per-level means and variances of the `M = 1` and `M = 10` passes.
    pub mean: [Vec<f64>; 2],
    pub variance: [Vec<f64>; 2],
    pub seconds_per_eval: Vec<f64>,
    pub work: f64,
}

impl PilotEstimates {
    /// `base` with the fitted rates and constants.
    pub fn hierarchy(&self, base: &MeshHierarchy) -> MeshHierarchy {
        if self.degenerate {
            return base.clone();
        }
        MeshHierarchy {
            eta_w: self.eta_w,
            eta_s: self.eta_s,
            c1: self.c1.max(f64::MIN_POSITIVE),
            c2: self.c2,
            ..base.clone()
        }
    }

    pub fn constants(&self) -> RateConstants {
        RateConstants {
            c1: self.c1,
            c2: if self.c2 > 0.0 { self.c2 } else { f64::MIN_POSITIVE },
            c3: self.c3,
            c4: self.c4,
        }
    }

    /// Pilot variances interpolated to inner size `m` with `V ≈ a + b/M`.
    pub fn variances_for_m(&self, m: usize) -> Vec<f64> {
        let [v1, v10] = &self.variance;
        if m >= PILOT_INNER[1] {
            return v10.clone();
        }
        if m <= PILOT_INNER[0] {
            return v1.clone();
        }
        let t = (1.0 / m as f64 - 0.1) / 0.9;
        v1.iter().zip(v10).map(|(&a, &b)| (b + (a - b) * t).max(0.0)).collect()
    }
}

fn fit_decay(hierarchy: &MeshHierarchy, values: &[f64]) -> Option<(f64, f64)> {
    let (x, y): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(l, v)| (hierarchy.h(l).ln(), v.ln()))
        .unzip();
    linear_fit(&x, &y)
}

fn time_levels(experiment: &Experiment, levels: usize, seed: u64) -> Vec<f64> {
    let theta = experiment
        .prior
        .sample(&mut substream(seed, StreamKind::Pilot, usize::MAX >> 8, 0));
    let mut eval = Evaluator::new(experiment);
    (0..=levels)
        .map(|l| {
            let reps = 3;
            let start = Instant::now();
            for _ in 0..reps {
                if eval.eval(&theta, l).is_err() {
                    return f64::NAN;
                }
            }
            start.elapsed().as_secs_f64() / reps as f64
        })
        .collect()
}

/// Two pilot passes over levels `0..=L_pilot` with `N_pilot` samples each.
///
/// Fits `C₂, η_w` from `|E_ℓ|`, `η_s` from `V_ℓ` (both on the `M = 10`
/// pass), `C₁` from the mean shift between passes under the `C₁/M` bias
/// model, and `C₃, C₄` from `V₀`.
pub fn pilot_run(experiment: &Experiment, cfg: &PilotConfig) -> Result<PilotEstimates> {
    let levels = cfg.levels.min(experiment.max_level());
    if cfg.samples < 2 {
        return Err(Error::Config("pilot needs at least two samples per level".into()));
    }
    let hierarchy = experiment.hierarchy();
    let mut mean = [vec![0.0; levels + 1], vec![0.0; levels + 1]];
    let mut variance = mean.clone();
    let mut work = 0.0;
    for (pass, &m) in PILOT_INNER.iter().enumerate() {
        for l in 0..=levels {
            let out = sample_level(
                experiment,
                l,
                m,
                m,
                true,
                cfg.seed,
                StreamKind::Pilot,
                0..cfg.samples as u64,
            )?;
            let mut stats = OnlineStats::new();
            for o in &out {
                work += work_of_counts(hierarchy, &o.counts);
                match o.value {
                    Some(v) => stats.push(v),
                    None => return Err(Error::EvidenceUnderflow),
                }
            }
            mean[pass][l] = stats.mean;
            variance[pass][l] = stats.variance();
        }
    }

    let seconds_per_eval = time_levels(experiment, levels, cfg.seed);
    let gamma_hat = {
        let (x, y): (Vec<f64>, Vec<f64>) = seconds_per_eval
            .iter()
            .enumerate()
            .filter(|(_, t)| **t > 0.0 && t.is_finite())
            .map(|(l, t)| (hierarchy.h(l).ln(), t.ln()))
            .unzip();
        linear_fit(&x, &y).map(|(s, _)| -s)
    };

    let shift = mean[0].iter().sum::<f64>() - mean[1].iter().sum::<f64>();
    let c1 = shift.abs() / (1.0 - 1.0 / PILOT_INNER[1] as f64);
    let c4 = (variance[0][0] - variance[1][0]) / 0.9;
    let c3 = variance[1][0] - c4 / PILOT_INNER[1] as f64;

    let degenerate = (1..=levels).all(|l| (0..2).all(|p| mean[p][l] == 0.0 && variance[p][l] == 0.0));
    let base = PilotEstimates {
        levels,
        samples: cfg.samples,
        c1,
        c2: 0.0,
        c3,
        c4,
        eta_w: hierarchy.eta_w,
        eta_s: hierarchy.eta_s,
        gamma_hat,
        degenerate,
        mean: mean.clone(),
        variance: variance.clone(),
        seconds_per_eval,
        work,
    };
    if degenerate {
        return Ok(base);
    }

    // Means indistinguishable from zero say nothing about the magnitude of
    // the bias and are left out of the fit.
    let abs_e: Vec<f64> = mean[1]
        .iter()
        .zip(&variance[1])
        .map(|(e, v)| {
            let se = (v / cfg.samples as f64).sqrt();
            if e.abs() > SIGNIFICANCE * se {
                e.abs()
            } else {
                0.0
            }
        })
        .collect();
    let (eta_w, ln_c2) = fit_decay(hierarchy, &abs_e).ok_or_else(|| {
        Error::RateEstimation(format!(
            "need |E_l| distinguishable from zero on at least two levels in 1..={levels}; raise the pilot level"
        ))
    })?;
    if !(eta_w > 0.0) {
        return Err(Error::RateEstimation(format!(
            "|E_l| does not decay (fitted rate {eta_w:.3}); raise the pilot level"
        )));
    }
    let eta_s = match fit_decay(hierarchy, &variance[1]) {
        Some((slope, _)) if slope > 0.0 => slope / 2.0,
        _ => eta_w,
    };
    Ok(PilotEstimates {
        c2: ln_c2.exp(),
        eta_w,
        eta_s,
        ..base
    })
}
