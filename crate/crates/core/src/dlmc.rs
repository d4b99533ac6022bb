//! Single-level double-loop Monte Carlo (DLMC) and its Laplace
//! importance-sampled variant (DLMCIS), plus the likelihood and evidence
//! kernels the multilevel estimators build on.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_models::{work_of_counts, Evaluator, Experiment, NoiseSpec};
use crate::laplace::{fit_proposal, Proposal};
use crate::rng::{substream, StreamKind};
use crate::stats::{c_alpha, log_mean_exp, OnlineStats};

/// Largest tolerated fraction of outer samples rejected for evidence underflow.
pub const MAX_REJECTION_FRACTION: f64 = 0.01;

/// `log p(Y|θ) = −(N_e/2) log det(2πΣ_ε) − ½ Σᵢ ‖yᵢ − g‖²_{Σ_ε⁻¹}`.
pub fn log_likelihood(y: &DMatrix<f64>, g: &DVector<f64>, noise: &NoiseSpec) -> f64 {
    let mut quad = 0.0;
    for col in y.column_iter() {
        for ((yi, gi), s) in col.iter().zip(g.iter()).zip(&noise.sigma_eps) {
            let r = yi - gi;
            quad += r * r / s;
        }
    }
    -0.5 * (y.ncols() as f64 * noise.log_det_2pi() + quad)
}

/// One outer draw `(θ_n, ε_n)`; data at level `k` are `g_k(θ_n)·1ᵀ + ε_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterSample {
    pub theta: Vec<f64>,
    pub eps: DMatrix<f64>,
}

impl OuterSample {
    pub fn draw<R: Rng + ?Sized>(experiment: &Experiment, rng: &mut R) -> Self {
        let theta = experiment.prior.sample(rng);
        let eps = experiment.noise.sample(rng);
        Self { theta, eps }
    }

    pub fn data(&self, g: &DVector<f64>) -> DMatrix<f64> {
        let mut y = self.eps.clone();
        for mut col in y.column_iter_mut() {
            col += g;
        }
        y
    }
}

/// Draws `m` inner samples from the proposal.
pub fn draw_inner<R: Rng + ?Sized>(
    experiment: &Experiment,
    proposal: &Proposal,
    m: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..m).map(|_| proposal.sample(&experiment.prior, rng)).collect()
}

/// `log p_ℓ(Y|θ_m) + log R(θ_m)` for each inner sample; `-∞` outside the
/// support, where the model is not evaluated.
pub fn inner_log_terms(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    proposal: &Proposal,
    inner: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let exp = eval.experiment;
    inner
        .iter()
        .map(|theta| {
            let lr = proposal.log_ratio(&exp.prior, theta);
            if lr == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            let g = eval.eval(theta, level)?;
            Ok(log_likelihood(y, &g, &exp.noise) + lr)
        })
        .collect()
}

/// Log of the mean of the exponentiated inner terms.
pub fn log_evidence_from_terms(terms: &[f64]) -> Result<f64> {
    let v = log_mean_exp(terms);
    if v == f64::NEG_INFINITY {
        Err(Error::EvidenceUnderflow)
    } else {
        Ok(v)
    }
}

/// `log[(1/M) Σ_m p_ℓ(Y|θ_m) R(θ_m)]` with `θ_m ~ π̃`.
pub fn estimate_log_evidence_is<R: Rng + ?Sized>(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    proposal: &Proposal,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let inner = draw_inner(eval.experiment, proposal, m, rng);
    let terms = inner_log_terms(eval, level, y, proposal, &inner)?;
    log_evidence_from_terms(&terms)
}

/// `log p_ℓ(Y|θ) − log p̂_ℓ(Y)`.
#[allow(clippy::too_many_arguments)]
pub fn f_hat<R: Rng + ?Sized>(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    theta: &[f64],
    proposal: &Proposal,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let g = eval.eval(theta, level)?;
    let ll = log_likelihood(y, &g, &eval.experiment.noise);
    Ok(ll - estimate_log_evidence_is(eval, level, y, proposal, m, rng)?)
}

/// Summary of one level (or of the single level of a DLMC run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    /// Outer samples `N_ℓ`.
    pub samples: u64,
    /// Inner samples `M_ℓ`.
    pub inner: u64,
    /// Sample mean `E_ℓ` and variance `V_ℓ` of the level's integrand.
    pub mean: f64,
    pub variance: f64,
    /// Forward evaluations per level `k` spent on this level, MAP included.
    pub evaluations: Vec<u64>,
    pub work: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimator: String,
    pub value: f64,
    /// `C_α √V̂` (zero for the deterministic estimator).
    pub stat_error: f64,
    /// Modeled bias for the Monte Carlo estimators, summed margin profit for
    /// MLDLSC.
    pub bias_est: f64,
    pub per_level: Vec<LevelSummary>,
    pub total_work: f64,
    pub seed: u64,
    pub tol: Option<f64>,
    pub alpha: f64,
    pub kappa: Option<f64>,
    pub converged: bool,
    pub rejected: u64,
    /// MAP searches that hit the iteration cap (their best iterate was used).
    pub map_failures: u64,
    /// MAP points on the uniform-prior box.
    pub boundary_fits: u64,
    /// Wall-clock seconds; excluded from the reproducible result file.
    #[serde(skip)]
    pub wall_time: f64,
}

impl EstimatorResult {
    pub fn finest_level(&self) -> usize {
        self.per_level.last().map_or(0, |l| l.level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlmcConfig {
    pub level: usize,
    pub outer: usize,
    pub inner: usize,
    pub use_is: bool,
    pub alpha: f64,
    pub seed: u64,
}

/// Per-sample outcome of the outer loop, reduced in index order.
#[derive(Debug, Clone, Default)]
pub(crate) struct SampleOutcome {
    pub value: Option<f64>,
    pub counts: Vec<u64>,
    pub map_failed: bool,
    pub on_boundary: bool,
}

pub(crate) fn fit_for(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    theta: &[f64],
    use_is: bool,
    outcome: &mut SampleOutcome,
) -> Result<Proposal> {
    if !use_is {
        return Ok(Proposal::Prior);
    }
    let fit = fit_proposal(eval, level, y, theta)?;
    outcome.map_failed = !fit.map_converged;
    outcome.on_boundary = fit.on_boundary;
    Ok(fit.proposal)
}

fn dlmc_sample(experiment: &Experiment, cfg: &DlmcConfig, index: u64) -> Result<SampleOutcome> {
    let mut rng = substream(cfg.seed, StreamKind::Sample, cfg.level, index);
    let mut eval = Evaluator::new(experiment);
    let mut out = SampleOutcome::default();
    let outer = OuterSample::draw(experiment, &mut rng);
    let g = eval.eval(&outer.theta, cfg.level)?;
    let y = outer.data(&g);
    let proposal = fit_for(&mut eval, cfg.level, &y, &outer.theta, cfg.use_is, &mut out)?;
    let ll = log_likelihood(&y, &g, &experiment.noise);
    out.value = match estimate_log_evidence_is(&mut eval, cfg.level, &y, &proposal, cfg.inner, &mut rng) {
        Ok(le) => Some(ll - le),
        Err(Error::EvidenceUnderflow) => None,
        Err(e) => return Err(e),
    };
    out.counts = eval.take_counts();
    Ok(out)
}

/// Reduces outcomes in index order so the result does not depend on the
/// thread schedule.
pub(crate) struct Reduced {
    pub stats: OnlineStats,
    pub counts: Vec<u64>,
    pub rejected: u64,
    pub map_failures: u64,
    pub boundary_fits: u64,
}

pub(crate) fn reduce(outcomes: Vec<SampleOutcome>, levels: usize) -> Reduced {
    let mut r = Reduced {
        stats: OnlineStats::new(),
        counts: vec![0; levels],
        rejected: 0,
        map_failures: 0,
        boundary_fits: 0,
    };
    for o in outcomes {
        match o.value {
            Some(v) => r.stats.push(v),
            None => r.rejected += 1,
        }
        for (c, k) in r.counts.iter_mut().zip(&o.counts) {
            *c += k;
        }
        r.map_failures += o.map_failed as u64;
        r.boundary_fits += o.on_boundary as u64;
    }
    r
}

pub(crate) fn check_rejections(rejected: u64, total: u64) -> Result<()> {
    if total > 0 && rejected as f64 > MAX_REJECTION_FRACTION * total as f64 {
        Err(Error::TooManyRejections {
            rejected: rejected as usize,
            total: total as usize,
        })
    } else {
        Ok(())
    }
}

/// `(1/N) Σ_n f̂(Y_n, θ_n)` at one level.
pub fn dlmc_estimate(experiment: &Experiment, cfg: &DlmcConfig) -> Result<EstimatorResult> {
    if cfg.outer == 0 || cfg.inner == 0 {
        return Err(Error::Config("DLMC needs N >= 1 and M >= 1".into()));
    }
    if cfg.level > experiment.max_level() {
        return Err(Error::LevelOutOfRange {
            level: cfg.level,
            max: experiment.max_level(),
        });
    }
    let start = Instant::now();
    let outcomes: Vec<SampleOutcome> = (0..cfg.outer as u64)
        .into_par_iter()
        .map(|n| dlmc_sample(experiment, cfg, n))
        .collect::<Result<_>>()?;
    let red = reduce(outcomes, experiment.max_level() + 1);
    check_rejections(red.rejected, cfg.outer as u64)?;
    let n = red.stats.count as f64;
    let variance = red.stats.variance();
    let total_work = work_of_counts(experiment.hierarchy(), &red.counts);
    Ok(EstimatorResult {
        estimator: if cfg.use_is { "dlmcis" } else { "dlmc" }.into(),
        value: red.stats.mean,
        stat_error: c_alpha(cfg.alpha) * (variance / n).sqrt(),
        bias_est: 0.0,
        per_level: vec![LevelSummary {
            level: cfg.level,
            samples: red.stats.count,
            inner: cfg.inner as u64,
            mean: red.stats.mean,
            variance,
            evaluations: red.counts,
            work: total_work,
        }],
        total_work,
        seed: cfg.seed,
        tol: None,
        alpha: cfg.alpha,
        kappa: None,
        converged: true,
        rejected: red.rejected,
        map_failures: red.map_failures,
        boundary_fits: red.boundary_fits,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{closed_form_eig, ConstantModel, LinearGaussianModel, PriorSpec, ToyModel};
    use std::sync::Arc;

    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    fn unit_linear() -> Experiment {
        let model = LinearGaussianModel::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        Experiment::new(
            Arc::new(model),
            PriorSpec::gaussian(&[0.0], &[1.0]).unwrap(),
            NoiseSpec::new(vec![1.0], 1).unwrap(),
        )
        .unwrap()
    }

    fn constant() -> Experiment {
        Experiment::new(
            Arc::new(ConstantModel::new(vec![1.0, 2.0], 2)),
            PriorSpec::uniform(&[(0.0, 1.0), (-1.0, 1.0)]).unwrap(),
            NoiseSpec::new(vec![0.5, 0.5], 2).unwrap(),
        )
        .unwrap()
    }

    fn toy() -> Experiment {
        Experiment::new(
            Arc::new(ToyModel::default_model()),
            PriorSpec::gaussian(&[0.0, 0.0], &[0.25, 0.25]).unwrap(),
            NoiseSpec::new(vec![0.01, 0.01], 1).unwrap(),
        )
        .unwrap()
    }

    fn cfg(outer: usize, inner: usize, use_is: bool, seed: u64) -> DlmcConfig {
        DlmcConfig {
            level: 0,
            outer,
            inner,
            use_is,
            alpha: 0.05,
            seed,
        }
    }

    #[test]
    fn likelihood_examples() {
        let noise = NoiseSpec::new(vec![1.0], 1).unwrap();
        let g = DVector::from_element(1, 0.4);
        let y = DMatrix::from_element(1, 1, 0.4);
        assert!((log_likelihood(&y, &g, &noise) + 0.5 * LN_2PI).abs() < 1e-15);
        let y = DMatrix::from_element(1, 1, 1.4);
        assert!((log_likelihood(&y, &g, &noise) + 0.5 * LN_2PI + 0.5).abs() < 1e-15);
        let noise2 = NoiseSpec::new(vec![1.0], 2).unwrap();
        let y = DMatrix::from_element(1, 2, 1.4);
        assert!((log_likelihood(&y, &g, &noise2) + LN_2PI + 1.0).abs() < 1e-14);
    }

    #[test]
    fn linear_evidence_is_exact_for_any_m() {
        let exp = unit_linear();
        let mut ev = Evaluator::new(&exp);
        let y = DMatrix::from_element(1, 1, 0.8);
        let fit = fit_proposal(&mut ev, 0, &y, &[0.1]).unwrap().proposal;
        // p(Y) = N(0.8; 0, 2)
        let exact = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 0.64 / 2.0);
        for m in [1, 7, 100] {
            let mut rng = substream(1, StreamKind::Sample, 0, m as u64);
            let v = estimate_log_evidence_is(&mut ev, 0, &y, &fit, m, &mut rng).unwrap();
            assert!((v - exact).abs() < 1e-8, "M={m}: {v} vs {exact}");
        }
    }

    #[test]
    fn constant_model_evidence_equals_likelihood() {
        let exp = constant();
        let mut ev = Evaluator::new(&exp);
        let y = DMatrix::from_row_slice(2, 2, &[1.3, 0.9, 2.2, 1.5]);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let ll = log_likelihood(&y, &c, &exp.noise);
        for use_is in [false, true] {
            let mut out = SampleOutcome::default();
            let p = fit_for(&mut ev, 0, &y, &[0.5, 0.0], use_is, &mut out).unwrap();
            let mut rng = substream(2, StreamKind::Sample, 0, 0);
            let v = estimate_log_evidence_is(&mut ev, 0, &y, &p, 13, &mut rng).unwrap();
            assert_eq!(v, ll);
        }
    }

    #[test]
    fn out_of_support_terms_underflow() {
        let exp = constant();
        let mut ev = Evaluator::new(&exp);
        let y = DMatrix::from_element(2, 2, 1.0);
        let fit = crate::laplace::LaplaceFit::new(DVector::from_vec(vec![50.0, 50.0]), DMatrix::identity(2, 2) * 1e-6)
            .unwrap();
        let p = Proposal::Laplace(fit);
        let mut rng = substream(2, StreamKind::Sample, 0, 0);
        assert_eq!(
            estimate_log_evidence_is(&mut ev, 0, &y, &p, 5, &mut rng),
            Err(Error::EvidenceUnderflow)
        );
    }

    #[test]
    fn log_sum_exp_avoids_spurious_underflow() {
        let terms = [-2000.0, -2001.0, f64::NEG_INFINITY];
        let v = log_evidence_from_terms(&terms).unwrap();
        assert!(v.is_finite() && v < -2000.0);
    }

    #[test]
    fn dlmcis_matches_oracle_on_unit_case() {
        let exp = unit_linear();
        let r = dlmc_estimate(&exp, &cfg(10_000, 1, true, 11)).unwrap();
        let oracle = 0.5 * 2f64.ln();
        assert!(
            (r.value - oracle).abs() < 3.0 * r.stat_error,
            "{} ± {}",
            r.value,
            r.stat_error
        );
        let exact = closed_form_eig(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            1,
        )
        .unwrap();
        assert!((exact - oracle).abs() < 1e-15);
    }

    #[test]
    fn constant_model_gives_exact_zero() {
        let exp = constant();
        for use_is in [false, true] {
            let r = dlmc_estimate(&exp, &cfg(50, 4, use_is, 3)).unwrap();
            assert_eq!(r.value, 0.0);
            assert_eq!(r.stat_error, 0.0);
        }
    }

    #[test]
    fn seed_determinism() {
        let exp = toy();
        let a = dlmc_estimate(&exp, &cfg(64, 3, true, 9)).unwrap();
        let b = dlmc_estimate(&exp, &cfg(64, 3, true, 9)).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.total_work, b.total_work);
    }

    #[test]
    fn importance_sampling_beats_prior_sampling_at_m1() {
        let exp = toy();
        let reference = dlmc_estimate(&exp, &cfg(4000, 64, true, 5)).unwrap().value;
        let with_is = dlmc_estimate(&exp, &cfg(1000, 1, true, 6)).unwrap().value;
        let without = dlmc_estimate(&exp, &cfg(1000, 1, false, 6)).unwrap().value;
        assert!((without - reference).abs() > (with_is - reference).abs());
    }

    #[test]
    fn work_includes_map_evaluations() {
        let exp = toy();
        let r = dlmc_estimate(&exp, &cfg(10, 2, true, 1)).unwrap();
        // outer + inner alone would be 10 * (1 + 2) = 30
        assert!(r.per_level[0].evaluations[0] > 30);
        assert_eq!(r.total_work, r.per_level[0].evaluations[0] as f64);
    }
}
