//! Multilevel double-loop Monte Carlo: coupled level differences of `f̂`,
//! pilot-based rate estimation, parameter selection and a continuation
//! driver targeting `P(|I − 𝓘| ≤ TOL) ≥ 1 − α`.

mod params;
mod pilot;
mod single;

pub use params::{
    allocate_outer, extend_variances, level_work, optimal_inner, optimal_kappa, optimal_level, select_parameters,
    theoretical_variance_bound, MPolicy, MlParameters, RateConstants, KAPPA_MAX,
};
pub use pilot::{pilot_run, PilotConfig, PilotEstimates};
pub use single::dlmc_at_tol;

use std::ops::Range;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dlmc::{
    check_rejections, draw_inner, fit_for, inner_log_terms, log_evidence_from_terms, log_likelihood, EstimatorResult,
    LevelSummary, OuterSample, SampleOutcome,
};
use crate::error::{Error, Result};
use crate::forward_models::{work_of_counts, Evaluator, Experiment};
use crate::rng::{substream, StreamKind};
use crate::stats::OnlineStats;

/// Levels with fewer samples than this use the model variance.
pub const MIN_VARIANCE_SAMPLES: u64 = 5;
/// Extra passes at the final tolerance when the variance constraint is
/// still violated after the schedule.
const MAX_EXTRA_PASSES: usize = 8;

/// One coupled difference `f̂_ℓ − f̂_{ℓ−1}` (or `f̂_0` on level 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSample {
    pub fine: f64,
    pub coarse: Option<f64>,
    pub value: f64,
    pub map_converged: bool,
    pub on_boundary: bool,
}

/// Draws one coupled difference at level `ell`.
///
/// Both terms share `θ_n`, `ε_n`, the Laplace fit at the fine data
/// `Y^{(ℓ)}`, and the coarse term uses the leading `m_prev` of the `m_ell`
/// inner samples.
pub fn delta_f_sample<R: Rng + ?Sized>(
    eval: &mut Evaluator<'_>,
    ell: usize,
    outer: &OuterSample,
    m_ell: usize,
    m_prev: usize,
    use_is: bool,
    rng: &mut R,
) -> Result<DeltaSample> {
    if m_ell == 0 || (ell > 0 && (m_prev == 0 || m_prev > m_ell)) {
        return Err(Error::Config(format!(
            "inner sizes must satisfy 1 <= M_prev <= M_ell (got {m_prev}, {m_ell})"
        )));
    }
    let exp = eval.experiment;
    let g_fine = eval.eval(&outer.theta, ell)?;
    let y_fine = outer.data(&g_fine);
    let coarse_data = if ell > 0 {
        let g = eval.eval(&outer.theta, ell - 1)?;
        let y = outer.data(&g);
        Some((g, y))
    } else {
        None
    };
    let mut flags = SampleOutcome::default();
    let proposal = fit_for(eval, ell, &y_fine, &outer.theta, use_is, &mut flags)?;
    let inner = draw_inner(exp, &proposal, m_ell, rng);

    let terms = inner_log_terms(eval, ell, &y_fine, &proposal, &inner)?;
    let fine = log_likelihood(&y_fine, &g_fine, &exp.noise) - log_evidence_from_terms(&terms)?;
    let coarse = match coarse_data {
        Some((g, y)) => {
            let terms = inner_log_terms(eval, ell - 1, &y, &proposal, &inner[..m_prev])?;
            Some(log_likelihood(&y, &g, &exp.noise) - log_evidence_from_terms(&terms)?)
        }
        None => None,
    };
    Ok(DeltaSample {
        fine,
        coarse,
        value: fine - coarse.unwrap_or(0.0),
        map_converged: !flags.map_failed,
        on_boundary: flags.on_boundary,
    })
}

/// Draws samples `range` of level `ell` from substreams of `(seed, kind)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_level(
    experiment: &Experiment,
    ell: usize,
    m_ell: usize,
    m_prev: usize,
    use_is: bool,
    seed: u64,
    kind: StreamKind,
    range: Range<u64>,
) -> Result<Vec<SampleOutcome>> {
    range
        .into_par_iter()
        .map(|n| {
            let mut rng = substream(seed, kind, ell, n);
            let mut eval = Evaluator::new(experiment);
            let outer = OuterSample::draw(experiment, &mut rng);
            let value = match delta_f_sample(&mut eval, ell, &outer, m_ell, m_prev, use_is, &mut rng) {
                Ok(d) => Some(d),
                Err(Error::EvidenceUnderflow) => None,
                Err(e) => return Err(e),
            };
            Ok(SampleOutcome {
                value: value.as_ref().map(|d| d.value),
                counts: eval.take_counts(),
                map_failed: value.as_ref().is_some_and(|d| !d.map_converged),
                on_boundary: value.as_ref().is_some_and(|d| d.on_boundary),
            })
        })
        .collect()
}

/// `n` coupled samples with `M = m` on each of levels `0..=levels`.
///
/// The fixed-size counterpart of a pilot pass, for studying the decay of
/// `E_ℓ` and `V_ℓ` with enough samples per level.
pub fn level_study(experiment: &Experiment, levels: usize, n: usize, m: usize, seed: u64) -> Result<Vec<LevelSummary>> {
    if levels > experiment.max_level() {
        return Err(Error::LevelOutOfRange {
            level: levels,
            max: experiment.max_level(),
        });
    }
    let nlev = experiment.max_level() + 1;
    (0..=levels)
        .map(|l| {
            let mut s = LevelStats::new(nlev);
            s.absorb(sample_level(
                experiment,
                l,
                m,
                m,
                true,
                seed,
                StreamKind::Sample,
                0..n as u64,
            )?);
            check_rejections(s.rejected, s.drawn)?;
            Ok(LevelSummary {
                level: l,
                samples: s.stats.count,
                inner: m as u64,
                mean: s.mean(),
                variance: s.variance(),
                work: work_of_counts(experiment.hierarchy(), &s.counts),
                evaluations: s.counts,
            })
        })
        .collect()
}

/// Running statistics of one level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub stats: OnlineStats,
    /// Samples drawn, including rejected ones.
    pub drawn: u64,
    pub rejected: u64,
    pub map_failures: u64,
    pub boundary_fits: u64,
    pub counts: Vec<u64>,
}

impl LevelStats {
    fn new(levels: usize) -> Self {
        Self {
            counts: vec![0; levels],
            ..Self::default()
        }
    }

    fn absorb(&mut self, outcomes: Vec<SampleOutcome>) {
        for o in outcomes {
            self.drawn += 1;
            match o.value {
                Some(v) => self.stats.push(v),
                None => self.rejected += 1,
            }
            for (c, k) in self.counts.iter_mut().zip(&o.counts) {
                *c += k;
            }
            self.map_failures += o.map_failed as u64;
            self.boundary_fits += o.on_boundary as u64;
        }
    }

    pub fn mean(&self) -> f64 {
        self.stats.mean
    }

    pub fn variance(&self) -> f64 {
        self.stats.variance()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MldlmcConfig {
    pub tol: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
    /// Continuation tolerances as multiples of `tol`, ending at 1.
    #[serde(default = "default_schedule")]
    pub schedule: Vec<f64>,
    #[serde(default)]
    pub m_policy: MPolicy,
    /// Use this finest level instead of `L*`.
    #[serde(default)]
    pub forced_level: Option<usize>,
    #[serde(default)]
    pub pilot: PilotConfig,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_schedule() -> Vec<f64> {
    vec![4.0, 2.0, 1.0]
}

impl MldlmcConfig {
    pub fn new(tol: f64, seed: u64) -> Self {
        Self {
            tol,
            alpha: default_alpha(),
            seed,
            schedule: default_schedule(),
            m_policy: MPolicy::Constant,
            forced_level: None,
            pilot: PilotConfig::default(),
        }
    }
}

/// Parameters for `tol` from pilot estimates; a degenerate pilot (all level
/// differences zero) yields a single level.
pub fn parameters_from_pilot(
    experiment: &Experiment,
    pilot: &PilotEstimates,
    tol: f64,
    alpha: f64,
    policy: MPolicy,
    forced_level: Option<usize>,
) -> Result<MlParameters> {
    let hierarchy = pilot.hierarchy(experiment.hierarchy());
    let constants = pilot.constants();
    let v = pilot.variances_for_m(1);
    let mut p = match (forced_level, pilot.degenerate) {
        (Some(level), _) => {
            let kappa = if pilot.degenerate {
                KAPPA_MAX
            } else {
                optimal_kappa(tol, constants.c2, &hierarchy, level).max(0.01)
            };
            params::parameters_for(tol, alpha, level, kappa, &constants, &hierarchy, &v, policy)
        }
        (None, true) => params::parameters_for(tol, alpha, 0, KAPPA_MAX, &constants, &hierarchy, &v, policy),
        (None, false) => select_parameters(tol, alpha, &constants, &hierarchy, &v, policy)?,
    };
    // variances observed at the chosen inner size
    let v = pilot.variances_for_m(p.m[p.levels]);
    if p.m.iter().all(|&m| m == p.m[p.levels]) {
        let work = level_work(&hierarchy, p.levels);
        let v = extend_variances(&v, p.levels, &p.m, &hierarchy);
        p.n = allocate_outer(tol, p.kappa, p.c_alpha, &v, &p.m, &work);
    }
    Ok(p)
}

/// MLDLMC estimate at `cfg.tol`. Runs the pilot unless estimates are given.
pub fn mldlmc_estimate(
    experiment: &Experiment,
    cfg: &MldlmcConfig,
    pilot: Option<&PilotEstimates>,
) -> Result<EstimatorResult> {
    let start = Instant::now();
    if !(cfg.tol > 0.0) || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!(
            "need TOL > 0 and alpha in (0, 1), got {} and {}",
            cfg.tol, cfg.alpha
        )));
    }
    if cfg.schedule.last() != Some(&1.0) || cfg.schedule.iter().any(|&f| !(f >= 1.0)) {
        return Err(Error::Config("continuation schedule must be >= 1 and end at 1".into()));
    }
    let owned;
    let pilot = match pilot {
        Some(p) => p,
        None => {
            owned = pilot_run(experiment, &cfg.pilot)?;
            &owned
        }
    };
    let params = parameters_from_pilot(experiment, pilot, cfg.tol, cfg.alpha, cfg.m_policy, cfg.forced_level)?;
    let levels = params.levels;
    if levels > experiment.max_level() {
        return Err(Error::Resource(format!(
            "TOL = {} needs level {levels} but the model stops at level {}",
            cfg.tol,
            experiment.max_level()
        )));
    }
    let hierarchy = pilot.hierarchy(experiment.hierarchy());
    let work = level_work(&hierarchy, levels);
    let m = params.m.clone();
    let nlev = experiment.max_level() + 1;
    let mut stats: Vec<LevelStats> = (0..=levels).map(|_| LevelStats::new(nlev)).collect();
    let prior_v = pilot.variances_for_m(m[levels]);

    let variances = |stats: &[LevelStats]| -> Vec<f64> {
        let observed: Vec<f64> = stats
            .iter()
            .enumerate()
            .map(|(l, s)| {
                if s.stats.count >= MIN_VARIANCE_SAMPLES {
                    s.variance()
                } else {
                    prior_v.get(l).copied().unwrap_or(f64::NAN)
                }
            })
            .collect();
        extend_variances(&observed, levels, &m, &hierarchy)
    };

    let target = (params.kappa * cfg.tol / params.c_alpha).powi(2);
    let mut passes: Vec<f64> = cfg.schedule.iter().map(|f| f * cfg.tol).collect();
    passes.extend(std::iter::repeat_n(cfg.tol, MAX_EXTRA_PASSES));
    let mut converged = false;
    for (pass, &tol_i) in passes.iter().enumerate() {
        let v = variances(&stats);
        let n = allocate_outer(tol_i, params.kappa, params.c_alpha, &v, &m, &work);
        for l in 0..=levels {
            let have = stats[l].drawn;
            if (n[l] as u64) > have {
                let m_prev = if l == 0 { m[0] } else { m[l - 1] };
                let out = sample_level(
                    experiment,
                    l,
                    m[l],
                    m_prev,
                    true,
                    cfg.seed,
                    StreamKind::Sample,
                    have..n[l] as u64,
                )?;
                stats[l].absorb(out);
            }
        }
        if pass + 1 >= cfg.schedule.len() {
            let v = variances(&stats);
            let var: f64 = v
                .iter()
                .zip(&stats)
                .map(|(vl, s)| vl / s.stats.count.max(1) as f64)
                .sum();
            if var <= target * (1.0 + 1e-12) {
                converged = true;
                break;
            }
        }
    }
    let total_drawn: u64 = stats.iter().map(|s| s.drawn).sum();
    let total_rejected: u64 = stats.iter().map(|s| s.rejected).sum();
    check_rejections(total_rejected, total_drawn)?;

    let v = variances(&stats);
    let value: f64 = stats.iter().map(LevelStats::mean).sum();
    let var: f64 = v
        .iter()
        .zip(&stats)
        .map(|(vl, s)| vl / s.stats.count.max(1) as f64)
        .sum();
    let per_level: Vec<LevelSummary> = stats
        .iter()
        .enumerate()
        .map(|(l, s)| LevelSummary {
            level: l,
            samples: s.stats.count,
            inner: m[l] as u64,
            mean: s.mean(),
            variance: s.variance(),
            evaluations: s.counts.clone(),
            work: work_of_counts(experiment.hierarchy(), &s.counts),
        })
        .collect();
    let total_work = per_level.iter().map(|l| l.work).sum();
    let bias_est = pilot.c2 * hierarchy.h(levels).powf(hierarchy.eta_w) * (!pilot.degenerate as u8 as f64)
        + pilot.c1 / m[levels] as f64;
    Ok(EstimatorResult {
        estimator: "mldlmc".into(),
        value,
        stat_error: params.c_alpha * var.sqrt(),
        bias_est,
        per_level,
        total_work,
        seed: cfg.seed,
        tol: Some(cfg.tol),
        alpha: cfg.alpha,
        kappa: Some(params.kappa),
        converged,
        rejected: total_rejected,
        map_failures: stats.iter().map(|s| s.map_failures).sum(),
        boundary_fits: stats.iter().map(|s| s.boundary_fits).sum(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}
