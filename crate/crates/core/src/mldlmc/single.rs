//! Single-level DLMC and DLMCIS driven by a tolerance instead of fixed
//! sample sizes.

use super::{optimal_inner, optimal_kappa, optimal_level, pilot_run, MldlmcConfig, PilotEstimates, KAPPA_MAX};
use crate::dlmc::{dlmc_estimate, DlmcConfig, EstimatorResult};
use crate::error::{Error, Result};
use crate::forward_models::Experiment;
use crate::stats::c_alpha;

/// Inner sizes of the two bias-probing passes at the chosen level.
const PROBE_INNER: [usize; 2] = [1, 10];
/// Outer samples per probing pass.
const PROBE_OUTER: usize = 100;
/// Seed offset separating the probing passes from the final run.
const PROBE_SEED: u64 = 0x5eed_0001;

/// DLMC (`use_is = false`) or DLMCIS at `cfg.tol` on the single level `L*`.
///
/// `L*` and `κ*` come from the multilevel pilot. Two probing passes at
/// `L*` with `M = 1` and `M = 10` give the inner bias constant and the
/// variance, which fix `M` and `N` for the final run.
pub fn dlmc_at_tol(
    experiment: &Experiment,
    cfg: &MldlmcConfig,
    use_is: bool,
    pilot: Option<&PilotEstimates>,
) -> Result<EstimatorResult> {
    if !(cfg.tol > 0.0) || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!(
            "need TOL > 0 and alpha in (0, 1), got {} and {}",
            cfg.tol, cfg.alpha
        )));
    }
    let owned;
    let pilot = match pilot {
        Some(p) => p,
        None => {
            owned = pilot_run(experiment, &cfg.pilot)?;
            &owned
        }
    };
    let hierarchy = pilot.hierarchy(experiment.hierarchy());
    let (level, kappa) = match (cfg.forced_level, pilot.degenerate) {
        (Some(l), _) => (
            l,
            optimal_kappa(cfg.tol, pilot.c2, &hierarchy, l).clamp(0.01, KAPPA_MAX),
        ),
        (None, true) => (0, KAPPA_MAX),
        (None, false) => {
            let mut l = optimal_level(cfg.tol, pilot.c2, &hierarchy);
            while optimal_kappa(cfg.tol, pilot.c2, &hierarchy, l) <= 0.0 {
                l += 1;
            }
            (l, optimal_kappa(cfg.tol, pilot.c2, &hierarchy, l))
        }
    };
    if level > experiment.max_level() {
        return Err(Error::Resource(format!(
            "TOL = {} needs level {level} but the model stops at level {}",
            cfg.tol,
            experiment.max_level()
        )));
    }
    let base = DlmcConfig {
        level,
        outer: PROBE_OUTER,
        inner: 1,
        use_is,
        alpha: cfg.alpha,
        seed: cfg.seed ^ PROBE_SEED,
    };
    let probes: Vec<EstimatorResult> = PROBE_INNER
        .iter()
        .map(|&m| {
            dlmc_estimate(
                experiment,
                &DlmcConfig {
                    inner: m,
                    ..base.clone()
                },
            )
        })
        .collect::<Result<_>>()?;
    let shift = probes[0].value - probes[1].value;
    let c1 = shift.abs() / (1.0 - 1.0 / PROBE_INNER[1] as f64);
    let m = optimal_inner(cfg.tol, c1, kappa);
    let (v1, v10) = (probes[0].per_level[0].variance, probes[1].per_level[0].variance);
    let v = if m >= PROBE_INNER[1] {
        v10
    } else {
        v10 + (v1 - v10) * (1.0 / m as f64 - 0.1) / 0.9
    };
    let n = ((c_alpha(cfg.alpha) / (kappa * cfg.tol)).powi(2) * v).ceil().max(2.0) as usize;
    let mut out = dlmc_estimate(
        experiment,
        &DlmcConfig {
            outer: n,
            inner: m,
            seed: cfg.seed,
            ..base
        },
    )?;
    out.total_work += probes.iter().map(|p| p.total_work).sum::<f64>();
    out.tol = Some(cfg.tol);
    out.kappa = Some(kappa);
    out.bias_est =
        pilot.c2 * hierarchy.h(level).powf(hierarchy.eta_w) * (!pilot.degenerate as u8 as f64) + c1 / m as f64;
    Ok(out)
}
