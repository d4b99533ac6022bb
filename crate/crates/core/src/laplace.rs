//! Laplace-based importance sampling: MAP search, inverse-Hessian covariance
//! and the Gaussian proposal `π̃(θ|Y) = N(θ̂, Σ̂)`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dlmc::log_likelihood;
use crate::error::{Error, Result};
use crate::forward_models::{Evaluator, PriorSpec};
use crate::rng::{substream, StreamKind};

pub const MAX_MAP_ITERATIONS: usize = 200;
pub const MAP_GRADIENT_TOL: f64 = 1e-8;
/// Relative Newton decrement below which the MAP search stops.
pub const MAP_DECREMENT_TOL: f64 = 1e-9;

/// Draws used to estimate the prior-box mass of a truncated proposal.
pub const TRUNCATION_DRAWS: usize = 1 << 16;

/// Gaussian proposal `N(θ̂, Σ̂)` with its Cholesky factor, optionally
/// restricted to the prior box.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceFit {
    pub theta_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    /// `-½ log det(2π Σ̂)`.
    pub log_norm_const: f64,
    /// Box the proposal is conditioned on, if any.
    pub support: Option<Vec<(f64, f64)>>,
    /// `log P(θ ∈ support)` under the untruncated Gaussian; 0 without a box.
    pub log_mass: f64,
}

impl LaplaceFit {
    pub fn new(theta_hat: DVector<f64>, sigma_hat: DMatrix<f64>) -> Result<Self> {
        let d = theta_hat.len();
        if sigma_hat.shape() != (d, d) {
            return Err(Error::Dimension {
                what: "laplace covariance",
                expected: d,
                got: sigma_hat.nrows(),
            });
        }
        let scale = sigma_hat.amax().max(f64::MIN_POSITIVE);
        if (&sigma_hat - sigma_hat.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Decomposition {
                context: "laplace covariance is not symmetric".into(),
            });
        }
        let sym = (&sigma_hat + sigma_hat.transpose()) * 0.5;
        let chol = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::Decomposition {
                context: "laplace covariance".into(),
            })?
            .unpack();
        let log_det: f64 = chol.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_norm_const = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            theta_hat,
            sigma_hat: sym,
            chol,
            log_norm_const,
            support: None,
            log_mass: 0.0,
        })
    }

    /// The proposal conditioned on the prior's box.
    ///
    /// The box mass is estimated from a fixed antithetic stream, so the
    /// same fit always gets the same normalization. `None` when no draw
    /// lands in the box. Unbounded priors are returned unchanged.
    pub fn truncated(mut self, prior: &PriorSpec) -> Option<Self> {
        let bounds = prior.bounds();
        if bounds.iter().all(|b| b.0 == f64::NEG_INFINITY && b.1 == f64::INFINITY) {
            return Some(self);
        }
        let d = self.dim();
        let mut rng = substream(0, StreamKind::Truncation, 0, 0);
        let mut z = vec![0.0; d];
        let mut hits = 0usize;
        let inside = |x: &[f64]| x.iter().zip(&bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi);
        for _ in 0..TRUNCATION_DRAWS / 2 {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            hits += inside(&self.transform(&z)) as usize;
            z.iter_mut().for_each(|v| *v = -*v);
            hits += inside(&self.transform(&z)) as usize;
        }
        if hits == 0 {
            return None;
        }
        self.log_mass = (hits as f64 / TRUNCATION_DRAWS as f64).ln();
        self.support = Some(bounds);
        Some(self)
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        self.support
            .as_ref()
            .is_none_or(|b| theta.iter().zip(b).all(|(&v, &(lo, hi))| v >= lo && v <= hi))
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// `θ̂ + L z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let x = &self.theta_hat + &self.chol * DVector::from_column_slice(z);
        x.as_slice().to_vec()
    }
}

/// `log π̃(θ|Y)`, renormalized on the support of a truncated fit.
pub fn is_log_density(fit: &LaplaceFit, theta: &[f64]) -> f64 {
    if !fit.in_support(theta) {
        return f64::NEG_INFINITY;
    }
    let r = DVector::from_column_slice(theta) - &fit.theta_hat;
    let z = fit
        .chol
        .solve_lower_triangular(&r)
        .expect("Cholesky factor has a positive diagonal");
    fit.log_norm_const - fit.log_mass - 0.5 * z.norm_squared()
}

/// `log π(θ) − log π̃(θ|Y)`; `-∞` outside the prior support.
pub fn is_ratio_log(prior: &PriorSpec, fit: &LaplaceFit, theta: &[f64]) -> f64 {
    let lp = prior.log_density(theta);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp - is_log_density(fit, theta)
}

/// `count` draws `θ̂ + L z`, one per row, ignoring any truncation.
pub fn sample_is<R: Rng + ?Sized>(fit: &LaplaceFit, count: usize, rng: &mut R) -> DMatrix<f64> {
    let d = fit.dim();
    let mut out = DMatrix::zeros(count, d);
    let mut z = vec![0.0; d];
    for i in 0..count {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let x = fit.transform(&z);
        for (j, v) in x.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Inner-loop sampling measure.
///
/// When the Laplace Hessian is singular (data carry no information in some
/// direction and the prior is flat) the inner samples come from the prior,
/// so the ratio `R` is identically one.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Laplace(LaplaceFit),
    Prior,
}

impl Proposal {
    pub fn log_ratio(&self, prior: &PriorSpec, theta: &[f64]) -> f64 {
        match self {
            Proposal::Laplace(fit) => is_ratio_log(prior, fit, theta),
            Proposal::Prior => {
                if prior.in_support(theta) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, prior: &PriorSpec, rng: &mut R) -> Vec<f64> {
        match self {
            Proposal::Laplace(fit) => loop {
                let z: Vec<f64> = (0..fit.dim()).map(|_| rng.sample(StandardNormal)).collect();
                let x = fit.transform(&z);
                if fit.in_support(&x) {
                    break x;
                }
            },
            Proposal::Prior => prior.sample(rng),
        }
    }

    pub fn laplace(&self) -> Option<&LaplaceFit> {
        match self {
            Proposal::Laplace(fit) => Some(fit),
            Proposal::Prior => None,
        }
    }
}

/// Proposal for one data set plus diagnostics of the MAP search.
#[derive(Debug, Clone)]
pub struct ProposalFit {
    pub proposal: Proposal,
    pub map_converged: bool,
    /// Some coordinate of `θ̂` sits on the prior box.
    pub on_boundary: bool,
}

fn column_mean(y: &DMatrix<f64>) -> DVector<f64> {
    y.column_mean()
}

/// Negative log-posterior (up to a constant) and `g_ℓ(θ)`.
fn objective(eval: &mut Evaluator<'_>, level: usize, y: &DMatrix<f64>, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let g = eval.eval(theta, level)?;
    let exp = eval.experiment;
    let phi = -log_likelihood(y, &g, &exp.noise) - exp.prior.log_density(theta);
    Ok((phi, g))
}

/// `N_e JᵀΣ_ε⁻¹J + (−∇∇ log π)`.
fn gauss_newton_hessian(eval: &Evaluator<'_>, jac: &DMatrix<f64>) -> DMatrix<f64> {
    let exp = eval.experiment;
    let inv: DVector<f64> = DVector::from_iterator(exp.noise.dim(), exp.noise.sigma_eps.iter().map(|s| 1.0 / s));
    let wj = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| inv[i] * jac[(i, j)]);
    let h = jac.transpose() * wj * exp.noise.n_e as f64 + exp.prior.neg_hessian_log_density();
    (&h + h.transpose()) * 0.5
}

/// `∇Φ = N_e JᵀΣ_ε⁻¹(ȳ − g) − ∇ log π`.
fn gradient(
    eval: &Evaluator<'_>,
    jac: &DMatrix<f64>,
    g: &DVector<f64>,
    y_bar: &DVector<f64>,
    theta: &[f64],
) -> DVector<f64> {
    let exp = eval.experiment;
    let r = DVector::from_iterator(
        g.len(),
        (y_bar - g).iter().zip(&exp.noise.sigma_eps).map(|(r, s)| r / s),
    );
    jac.transpose() * r * exp.noise.n_e as f64 - exp.prior.grad_log_density(theta)
}

fn free_coordinates(prior: &PriorSpec, theta: &[f64], grad: &DVector<f64>) -> Vec<bool> {
    prior
        .bounds()
        .iter()
        .zip(theta)
        .zip(grad.iter())
        .map(|((&(lo, hi), &x), &gr)| !((x <= lo && gr > 0.0) || (x >= hi && gr < 0.0)))
        .collect()
}

struct MapState {
    theta: Vec<f64>,
    jacobian: DMatrix<f64>,
    converged: bool,
    grad_norm: f64,
    iterations: usize,
}

impl MapState {
    fn new(theta: &[f64], jacobian: DMatrix<f64>, converged: bool, grad_norm: f64, iterations: usize) -> Self {
        Self {
            theta: theta.to_vec(),
            jacobian,
            converged,
            grad_norm,
            iterations,
        }
    }
}

fn map_search(eval: &mut Evaluator<'_>, level: usize, y: &DMatrix<f64>, theta_init: &[f64]) -> Result<MapState> {
    let prior = eval.experiment.prior.clone();
    let y_bar = column_mean(y);
    let mut theta = theta_init.to_vec();
    prior.project(&mut theta);
    let (mut phi, mut g) = objective(eval, level, y, &theta)?;
    let mut damping = 0.0f64;
    let mut last_grad = f64::INFINITY;

    for it in 0..MAX_MAP_ITERATIONS {
        let jac = eval.jacobian(&theta, level)?;
        let grad = gradient(eval, &jac, &g, &y_bar, &theta);
        let free = free_coordinates(&prior, &theta, &grad);
        let pg = grad
            .iter()
            .zip(&free)
            .map(|(v, &f)| if f { v * v } else { 0.0 })
            .sum::<f64>()
            .sqrt();
        last_grad = pg;
        if pg <= MAP_GRADIENT_TOL {
            return Ok(MapState::new(&theta, jac, true, pg, it));
        }
        let idx: Vec<usize> = (0..theta.len()).filter(|&i| free[i]).collect();
        let h_full = gauss_newton_hessian(eval, &jac);
        let hf = h_full.select_rows(&idx).select_columns(&idx);
        let gf = DVector::from_iterator(idx.len(), idx.iter().map(|&i| grad[i]));
        let diag_scale = hf.diagonal().amax().max(f64::MIN_POSITIVE);

        let mut accepted = false;
        let mut decrement = 0.0;
        for _ in 0..12 {
            let mut a = hf.clone();
            for k in 0..idx.len() {
                a[(k, k)] += damping * diag_scale + 1e-14 * diag_scale;
            }
            let Some(step) = Cholesky::new(a).map(|c| c.solve(&(-&gf))) else {
                damping = (damping * 10.0).max(1e-8);
                continue;
            };
            decrement = -gf.dot(&step);
            // the remaining gain in log-posterior is negligible
            if decrement <= MAP_DECREMENT_TOL * phi.abs().max(1.0) {
                return Ok(MapState::new(&theta, jac.clone(), true, pg, it));
            }
            let mut t = 1.0;
            for _ in 0..30 {
                let mut trial = theta.clone();
                for (k, &i) in idx.iter().enumerate() {
                    trial[i] += t * step[k];
                }
                prior.project(&mut trial);
                let moved: f64 = trial
                    .iter()
                    .zip(&theta)
                    .zip(grad.iter())
                    .map(|((a, b), g)| (a - b) * g)
                    .sum();
                let (phi_trial, g_trial) = objective(eval, level, y, &trial)?;
                if phi_trial <= phi + 1e-4 * moved.min(0.0) && phi_trial < phi {
                    theta = trial;
                    phi = phi_trial;
                    g = g_trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                damping *= 0.1;
                if damping < 1e-10 {
                    damping = 0.0;
                }
                break;
            }
            damping = (damping * 10.0).max(1e-6);
        }
        if !accepted {
            // Stalled: no descent possible at working precision.
            let converged = decrement <= 1e-8 * phi.abs().max(1.0);
            return Ok(MapState::new(&theta, jac, converged, pg, it));
        }
    }
    let jac = eval.jacobian(&theta, level)?;
    Ok(MapState {
        theta,
        jacobian: jac,
        converged: false,
        grad_norm: last_grad,
        iterations: MAX_MAP_ITERATIONS,
    })
}

/// Minimizer of `½Σᵢ‖yᵢ − g_ℓ(θ)‖²_{Σ_ε⁻¹} − log π(θ)` over the prior support,
/// by projected Gauss-Newton with Levenberg-Marquardt damping.
pub fn find_map(eval: &mut Evaluator<'_>, level: usize, y: &DMatrix<f64>, theta_init: &[f64]) -> Result<Vec<f64>> {
    let state = map_search(eval, level, y, theta_init)?;
    if state.converged {
        Ok(state.theta)
    } else {
        Err(Error::MapNotConverged {
            best: state.theta,
            grad_norm: state.grad_norm,
            iterations: state.iterations,
        })
    }
}

fn covariance_from_jacobian(eval: &Evaluator<'_>, jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = gauss_newton_hessian(eval, jac);
    let eig = SymmetricEigen::new(h.clone());
    let (k, &min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let max = eig.eigenvalues.amax();
    if !(min > 1e-12 * max) || max == 0.0 {
        return Err(Error::SingularHessian {
            direction: eig.eigenvectors.column(k).iter().copied().collect(),
            eigenvalue: min,
        });
    }
    let inv = Cholesky::new(h)
        .ok_or_else(|| Error::Decomposition {
            context: "laplace Hessian".into(),
        })?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `Σ̂ = (N_e JᵀΣ_ε⁻¹J − ∇∇ log π(θ̂))⁻¹`.
pub fn laplace_covariance(eval: &mut Evaluator<'_>, level: usize, theta_hat: &[f64]) -> Result<DMatrix<f64>> {
    let jac = eval.jacobian(theta_hat, level)?;
    covariance_from_jacobian(eval, &jac)
}

/// MAP search started at `theta_init` followed by the covariance at `θ̂`.
///
/// A MAP search that runs out of iterations still yields a proposal centered
/// at its best iterate; a singular Hessian yields [`Proposal::Prior`].
pub fn fit_proposal(
    eval: &mut Evaluator<'_>,
    level: usize,
    y: &DMatrix<f64>,
    theta_init: &[f64],
) -> Result<ProposalFit> {
    let state = map_search(eval, level, y, theta_init)?;

    let on_boundary = eval
        .experiment
        .prior
        .bounds()
        .iter()
        .zip(&state.theta)
        .any(|(&(lo, hi), &x)| x <= lo || x >= hi);
    let proposal = match covariance_from_jacobian(eval, &state.jacobian) {
        Ok(sigma) => match LaplaceFit::new(DVector::from_vec(state.theta), sigma)?.truncated(&eval.experiment.prior) {
            Some(fit) => Proposal::Laplace(fit),
            None => Proposal::Prior,
        },
        Err(Error::SingularHessian { .. }) => Proposal::Prior,
        Err(e) => return Err(e),
    };
    Ok(ProposalFit {
        proposal,
        map_converged: state.converged,
        on_boundary,
    })
}
