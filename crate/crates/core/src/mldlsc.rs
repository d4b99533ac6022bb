//! Multilevel double-loop stochastic collocation.
//!
//! The EIG is written as an integral over `(θ, ε)` of
//! `f̃_ℓ = log π_ε(ε) − log Q[Ψ_ℓ]`, where `Q` is a tensor Gauss-Hermite rule
//! for the evidence on points mapped by the Laplace fit. The outer integral
//! uses sparse quadrature over the multi-index `[ℓ, β₁]`, built adaptively.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dlmc::{log_likelihood, EstimatorResult, LevelSummary};
use crate::error::{Error, Result};
use crate::forward_models::{work_of_counts, Evaluator, Experiment, PriorDim, PriorSpec};
use crate::laplace::{fit_proposal, is_ratio_log, LaplaceFit, Proposal};
use crate::sparse_grid::{
    adapt_index_set, cc_rule, for_each_tensor_node, gh_rule, mixed_difference, MultiIndex, QuadratureRule1D,
};
use crate::stats::log_sum_exp;

/// `log Ψ_ℓ(θ̃) = log p_ℓ(Y|θ̃) + log R(θ̃; Y)`; `-∞` outside the support.
pub fn log_psi(
    eval: &mut Evaluator<'_>,
    level: usize,
    theta: &[f64],
    y: &DMatrix<f64>,
    fit: &LaplaceFit,
) -> Result<f64> {
    let exp = eval.experiment;
    let lr = is_ratio_log(&exp.prior, fit, theta);
    if lr == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let g = eval.eval(theta, level)?;
    Ok(log_likelihood(y, &g, &exp.noise) + lr)
}

pub fn psi(eval: &mut Evaluator<'_>, level: usize, theta: &[f64], y: &DMatrix<f64>, fit: &LaplaceFit) -> Result<f64> {
    log_psi(eval, level, theta, y, fit).map(f64::exp)
}

/// Rule on the prior marginal in standard coordinates plus its affine map.
fn prior_rule(dim: &PriorDim, beta: u32) -> (QuadratureRule1D, f64, f64) {
    match *dim {
        PriorDim::Uniform { lo, hi } => (cc_rule(beta), 0.5 * (lo + hi), 0.5 * (hi - lo)),
        PriorDim::Gaussian { mean, variance } => (gh_rule(beta), mean, variance.sqrt()),
    }
}

/// `log Q^{β₂}[Ψ_ℓ]`: tensor Gauss-Hermite on `θ̂ + L z`, or the prior's own
/// tensor rule when the proposal fell back to the prior.
fn log_inner_quadrature(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    proposal: &Proposal,
    beta2: &[u32],
) -> Result<f64> {
    let exp = eval.experiment;
    let mut terms = Vec::new();
    let mut failure = None;
    match proposal {
        Proposal::Laplace(fit) => {
            let rules: Vec<QuadratureRule1D> = beta2.iter().map(|&b| gh_rule(b)).collect();
            for_each_tensor_node(&rules, |_, z, w| {
                if failure.is_some() {
                    return;
                }
                let theta = fit.transform(z);
                match log_psi(eval, level, &theta, y, fit) {
                    Ok(lp) => terms.push(w.ln() + lp),
                    Err(e) => failure = Some(e),
                }
            });
        }
        Proposal::Prior => {
            let maps: Vec<(QuadratureRule1D, f64, f64)> = exp
                .prior
                .dims
                .iter()
                .zip(beta2)
                .map(|(d, &b)| prior_rule(d, b))
                .collect();
            let rules: Vec<QuadratureRule1D> = maps.iter().map(|m| m.0.clone()).collect();
            for_each_tensor_node(&rules, |_, z, w| {
                if failure.is_some() {
                    return;
                }
                let theta: Vec<f64> = z.iter().zip(&maps).map(|(z, m)| m.1 + m.2 * z).collect();
                match eval.eval(&theta, level) {
                    Ok(g) => terms.push(w.ln() + log_likelihood(y, &g, &exp.noise)),
                    Err(e) => failure = Some(e),
                }
            });
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let v = log_sum_exp(&terms);
    if v == f64::NEG_INFINITY {
        Err(Error::EvidenceUnderflow)
    } else {
        Ok(v)
    }
}

/// Outcome of one `f̃` evaluation with its fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeValue {
    pub value: f64,
    pub map_converged: bool,
    pub on_boundary: bool,
}

/// `f̃_{ℓ,β₂}(ε, θ) = log π_ε(ε) − log Q^{β₂}[Ψ_ℓ]` with `Y = g_ℓ(θ)·1ᵀ + ε`.
pub fn f_tilde(
    eval: &mut Evaluator<'_>,
    level: usize,
    theta: &[f64],
    eps: &DMatrix<f64>,
    beta2: &[u32],
) -> Result<NodeValue> {
    let exp = eval.experiment;
    if beta2.len() != exp.dim_theta() || beta2.contains(&0) {
        return Err(Error::Config(format!(
            "inner levels need {} entries >= 1, got {beta2:?}",
            exp.dim_theta()
        )));
    }
    let g = eval.eval(theta, level)?;
    let mut y = eps.clone();
    for mut col in y.column_iter_mut() {
        col += &g;
    }
    let fit = fit_proposal(eval, level, &y, theta)?;
    let log_q = log_inner_quadrature(eval, level, &y, &fit.proposal, beta2)?;
    Ok(NodeValue {
        value: exp.noise.log_density(eps) - log_q,
        map_converged: fit.map_converged,
        on_boundary: fit.on_boundary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MldlscConfig {
    pub tol: f64,
    /// Inner Gauss-Hermite levels per parameter; all ones (the Laplace
    /// point alone) when absent.
    #[serde(default)]
    pub beta2: Option<Vec<u32>>,
    /// Highest quadrature level in any outer dimension.
    #[serde(default = "default_max_beta")]
    pub max_beta: u32,
    /// Work budget in `h^{-γ}` units.
    #[serde(default)]
    pub max_work: Option<f64>,
}

fn default_max_beta() -> u32 {
    8
}

impl MldlscConfig {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            beta2: None,
            max_beta: default_max_beta(),
            max_work: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LevelTally {
    nodes: u64,
    counts: Vec<u64>,
}

/// Memoized level quadratures `U([ℓ, β₁]) = Q^{β₁}[f̃_ℓ]`.
///
/// Node values are cached per `(ℓ, standard coordinates)`, so nested
/// Clenshaw-Curtis grids and the shared Hermite center reuse earlier MAP
/// fits and forward solves; each node's work is counted once.
pub struct CollocationState<'a> {
    experiment: &'a Experiment,
    beta2: Vec<u32>,
    nodes: HashMap<(usize, Vec<u64>), NodeValue>,
    tally: Vec<LevelTally>,
    map_failures: u64,
    boundary_fits: u64,
}

impl<'a> CollocationState<'a> {
    pub fn new(experiment: &'a Experiment, beta2: Option<Vec<u32>>) -> Result<Self> {
        let d = experiment.dim_theta();
        let beta2 = beta2.unwrap_or_else(|| vec![1; d]);
        if beta2.len() != d || beta2.contains(&0) {
            return Err(Error::Config(format!(
                "inner levels need {d} entries >= 1, got {beta2:?}"
            )));
        }
        Ok(Self {
            experiment,
            beta2,
            nodes: HashMap::new(),
            tally: vec![LevelTally::default(); experiment.max_level() + 1],
            map_failures: 0,
            boundary_fits: 0,
        })
    }

    /// Outer dimensions: `d` parameters, then `q·N_e` noise entries.
    pub fn outer_dim(&self) -> usize {
        self.experiment.dim_theta() + self.experiment.noise.dim() * self.experiment.noise.n_e
    }

    fn outer_rules(&self, beta1: &[u32]) -> Vec<(QuadratureRule1D, f64, f64)> {
        let exp = self.experiment;
        let d = exp.dim_theta();
        let q = exp.noise.dim();
        beta1
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                if k < d {
                    prior_rule(&exp.prior.dims[k], b)
                } else {
                    (gh_rule(b), 0.0, exp.noise.sigma_eps[(k - d) % q].sqrt())
                }
            })
            .collect()
    }

    /// `U([ℓ, β₁])`; `index` holds `ℓ` first.
    pub fn level_quadrature(&mut self, index: &MultiIndex) -> Result<f64> {
        let exp = self.experiment;
        if index.dim() != self.outer_dim() + 1 {
            return Err(Error::Dimension {
                what: "collocation multi-index",
                expected: self.outer_dim() + 1,
                got: index.dim(),
            });
        }
        let level = index.0[0] as usize;
        if level > exp.max_level() {
            return Err(Error::Resource(format!(
                "collocation needs level {level} but the model stops at level {}",
                exp.max_level()
            )));
        }
        let maps = self.outer_rules(&index.0[1..]);
        let rules: Vec<QuadratureRule1D> = maps.iter().map(|m| m.0.clone()).collect();
        let mut grid = Vec::new();
        for_each_tensor_node(&rules, |_, z, w| grid.push((z.to_vec(), w)));

        let missing: Vec<&Vec<f64>> = {
            let mut seen = std::collections::HashSet::new();
            grid.iter()
                .map(|(z, _)| z)
                .filter(|z| {
                    let key = (level, bits(z));
                    !self.nodes.contains_key(&key) && seen.insert(key)
                })
                .collect()
        };
        let d = exp.dim_theta();
        let q = exp.noise.dim();
        let beta2 = &self.beta2;
        let fresh: Vec<Result<(NodeValue, Vec<u64>)>> = missing
            .par_iter()
            .map(|z| {
                let x: Vec<f64> = z.iter().zip(&maps).map(|(z, m)| m.1 + m.2 * z).collect();
                let theta = &x[..d];
                let eps = DMatrix::from_column_slice(q, exp.noise.n_e, &x[d..]);
                let mut eval = Evaluator::new(exp);
                let v = f_tilde(&mut eval, level, theta, &eps, beta2)?;
                Ok((v, eval.take_counts()))
            })
            .collect();
        for (z, r) in missing.iter().zip(fresh) {
            let (v, counts) = r?;
            let tally = &mut self.tally[level];
            tally.nodes += 1;
            tally.counts.resize(counts.len(), 0);
            for (c, k) in tally.counts.iter_mut().zip(&counts) {
                *c += k;
            }
            self.map_failures += !v.map_converged as u64;
            self.boundary_fits += v.on_boundary as u64;
            self.nodes.insert((level, bits(z)), v);
        }
        Ok(grid.iter().map(|(z, w)| w * self.nodes[&(level, bits(z))].value).sum())
    }

    pub fn total_work(&self) -> f64 {
        let h = self.experiment.hierarchy();
        self.tally.iter().map(|t| work_of_counts(h, &t.counts)).sum()
    }
}

fn bits(z: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 are the same node
    z.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Adaptive MLDLSC estimate. RNG-free and deterministic.
pub fn mldlsc_estimate(experiment: &Experiment, cfg: &MldlscConfig) -> Result<EstimatorResult> {
    let start = Instant::now();
    if !(cfg.tol > 0.0) || cfg.max_beta == 0 {
        return Err(Error::Config(format!(
            "need TOL > 0 and max_beta >= 1, got {} and {}",
            cfg.tol, cfg.max_beta
        )));
    }
    let mut state = CollocationState::new(experiment, cfg.beta2.clone())?;
    let dim = state.outer_dim() + 1;
    let mut floors = vec![1u32; dim];
    floors[0] = 0;
    let mut caps = vec![cfg.max_beta; dim];
    caps[0] = experiment.max_level() as u32;

    let mut u_memo: HashMap<MultiIndex, f64> = HashMap::new();
    let adapt = {
        let state = &mut state;
        let u_memo = &mut u_memo;
        let floors_p = floors.clone();
        adapt_index_set(
            floors.clone(),
            Some(&caps),
            cfg.tol,
            cfg.max_work.unwrap_or(f64::INFINITY),
            |idx| {
                let before = state.total_work();
                let gain = mixed_difference(idx, &floors_p, u_memo, |m| state.level_quadrature(m))?;
                Ok((gain, (state.total_work() - before).max(f64::MIN_POSITIVE)))
            },
        )?
    };
    if !adapt.converged {
        let top = adapt.set.iter().map(|m| m.0[0]).max().unwrap_or(0) as usize;
        if top == experiment.max_level() && cfg.max_work.is_none() {
            return Err(Error::Resource(format!(
                "TOL = {} not met with levels up to the model maximum {}",
                cfg.tol,
                experiment.max_level()
            )));
        }
    }

    let coeffs = adapt.set.combination_coefficients();
    let finest = adapt.set.iter().map(|m| m.0[0]).max().unwrap_or(0) as usize;
    let mut level_value = vec![0.0; finest + 1];
    for (idx, c) in &coeffs {
        let u = match u_memo.get(idx) {
            Some(&u) => u,
            None => state.level_quadrature(idx)?,
        };
        level_value[idx.0[0] as usize] += *c as f64 * u;
    }
    let value: f64 = level_value.iter().sum();
    let inner: u64 = state.beta2.iter().map(|&b| (2 * b - 1) as u64).product();
    let h = experiment.hierarchy();
    let per_level = (0..=finest)
        .map(|l| {
            let t = &state.tally[l];
            let mut counts = t.counts.clone();
            counts.resize(experiment.max_level() + 1, 0);
            LevelSummary {
                level: l,
                samples: t.nodes,
                inner,
                mean: level_value[l],
                variance: 0.0,
                work: work_of_counts(h, &counts),
                evaluations: counts,
            }
        })
        .collect();
    Ok(EstimatorResult {
        estimator: "mldlsc".into(),
        value,
        stat_error: 0.0,
        bias_est: adapt.error_estimate,
        per_level,
        total_work: state.total_work(),
        seed: 0,
        tol: Some(cfg.tol),
        alpha: 0.0,
        kappa: None,
        converged: adapt.converged,
        rejected: 0,
        map_failures: state.map_failures,
        boundary_fits: state.boundary_fits,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Prior marginals as standard-coordinate rules, for callers building
/// their own outer grids.
pub fn prior_rules(prior: &PriorSpec, beta: &[u32]) -> Vec<(QuadratureRule1D, f64, f64)> {
    prior.dims.iter().zip(beta).map(|(d, &b)| prior_rule(d, b)).collect()
}
