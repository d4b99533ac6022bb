//! Level-discretized forward models `g_ℓ(θ)` and the experiment description
//! (prior, noise, mesh hierarchy) the estimators share.

mod eit;
mod linear;
mod toy;

pub use eit::{
    assemble_system, recovered_currents, solve_cem, CemSolution, EitModel, EitModelSpec, Electrode, Ply, Side,
};
pub use linear::{closed_form_eig, ConstantModel, LinearGaussianModel};
pub use toy::ToyModel;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mesh hierarchy `h_ℓ = h0 · β^{-ℓ}` together with the rate model used for
/// parameter selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshHierarchy {
    pub h0: f64,
    pub beta: u32,
    pub gamma: f64,
    pub eta_w: f64,
    pub eta_s: f64,
    pub c1: f64,
    pub c2: f64,
}

impl MeshHierarchy {
    pub fn new(h0: f64, beta: u32, gamma: f64, eta_w: f64, eta_s: f64) -> Result<Self> {
        let h = Self {
            h0,
            beta,
            gamma,
            eta_w,
            eta_s,
            c1: 1.0,
            c2: 1.0,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn with_constants(mut self, c1: f64, c2: f64) -> Result<Self> {
        self.c1 = c1;
        self.c2 = c2;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 2 {
            return Err(Error::Config(format!(
                "refinement factor beta={} must be >= 2",
                self.beta
            )));
        }
        for (name, v) in [
            ("h0", self.h0),
            ("gamma", self.gamma),
            ("eta_w", self.eta_w),
            ("eta_s", self.eta_s),
            ("c1", self.c1),
            ("c2", self.c2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hierarchy field {name}={v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn h(&self, level: usize) -> f64 {
        self.h0 * (self.beta as f64).powi(-(level as i32))
    }

    pub fn work(&self, level: usize) -> f64 {
        self.h(level).powf(-self.gamma)
    }
}

/// Relative cost `h_ℓ^{-γ}` of one evaluation of `g_ℓ`.
pub fn work_of_level(hierarchy: &MeshHierarchy, level: usize) -> f64 {
    hierarchy.work(level)
}

/// One independent prior marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorDim {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, variance: f64 },
}

impl PriorDim {
    fn validate(&self) -> Result<()> {
        match *self {
            PriorDim::Uniform { lo, hi } if !(lo < hi) => Err(Error::Config(format!(
                "uniform prior requires lo < hi, got [{lo}, {hi}]"
            ))),
            PriorDim::Gaussian { variance, .. } if !(variance > 0.0) => {
                Err(Error::Config(format!("gaussian prior variance {variance} must be > 0")))
            }
            _ => Ok(()),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            PriorDim::Uniform { lo, hi } => (lo, hi),
            PriorDim::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Characteristic width used to scale finite-difference steps.
    pub fn width(&self) -> f64 {
        match *self {
            PriorDim::Uniform { lo, hi } => hi - lo,
            PriorDim::Gaussian { variance, .. } => variance.sqrt(),
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            PriorDim::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorDim::Gaussian { mean, variance } => {
                let r = x - mean;
                -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + r * r / variance)
            }
        }
    }
}

/// Product prior over `θ ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub dims: Vec<PriorDim>,
}

impl PriorSpec {
    pub fn new(dims: Vec<PriorDim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("prior must have at least one dimension".into()));
        }
        for d in &dims {
            d.validate()?;
        }
        Ok(Self { dims })
    }

    pub fn uniform(bounds: &[(f64, f64)]) -> Result<Self> {
        Self::new(bounds.iter().map(|&(lo, hi)| PriorDim::Uniform { lo, hi }).collect())
    }

    pub fn gaussian(mean: &[f64], variance: &[f64]) -> Result<Self> {
        Self::new(
            mean.iter()
                .zip(variance)
                .map(|(&mean, &variance)| PriorDim::Gaussian { mean, variance })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.dims.iter().zip(theta).map(|(d, &x)| d.log_density(x)).sum()
    }

    pub fn in_support(&self, theta: &[f64]) -> bool {
        self.dims.iter().zip(theta).all(|(d, &x)| {
            let (lo, hi) = d.bounds();
            x >= lo && x <= hi
        })
    }

    /// `∇ log π(θ)`; zero inside a uniform box.
    pub fn grad_log_density(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.dims.iter().zip(theta).map(|(d, &x)| match *d {
                PriorDim::Uniform { .. } => 0.0,
                PriorDim::Gaussian { mean, variance } => -(x - mean) / variance,
            }),
        )
    }

    /// `-∇∇ log π`, which is diagonal and constant for this prior family.
    pub fn neg_hessian_log_density(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.dims.iter().map(|d| match *d {
                PriorDim::Uniform { .. } => 0.0,
                PriorDim::Gaussian { variance, .. } => 1.0 / variance,
            }),
        ))
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.dims.iter().map(PriorDim::bounds).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.dims.iter().map(PriorDim::width).collect()
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (x, d) in theta.iter_mut().zip(&self.dims) {
            let (lo, hi) = d.bounds();
            *x = x.clamp(lo, hi);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| match *d {
                PriorDim::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
                PriorDim::Gaussian { mean, variance } => {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + variance.sqrt() * z
                }
            })
            .collect()
    }
}

/// Diagonal Gaussian measurement noise, repeated over `N_e` experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_eps: Vec<f64>,
    pub n_e: usize,
}

impl NoiseSpec {
    pub fn new(sigma_eps: Vec<f64>, n_e: usize) -> Result<Self> {
        if sigma_eps.is_empty() || sigma_eps.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        if n_e == 0 {
            return Err(Error::Config("n_e must be >= 1".into()));
        }
        Ok(Self { sigma_eps, n_e })
    }

    pub fn dim(&self) -> usize {
        self.sigma_eps.len()
    }

    /// `log det(2π Σ_ε)` for a single experiment.
    pub fn log_det_2pi(&self) -> f64 {
        self.sigma_eps
            .iter()
            .map(|s| (2.0 * std::f64::consts::PI * s).ln())
            .sum()
    }

    /// Draw `ε` as a `q × N_e` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let q = self.dim();
        DMatrix::from_fn(q, self.n_e, |i, _| {
            let z: f64 = rng.sample(StandardNormal);
            self.sigma_eps[i].sqrt() * z
        })
    }

    /// `log π_ε(ε)` summed over the `N_e` columns.
    pub fn log_density(&self, eps: &DMatrix<f64>) -> f64 {
        let mut quad = 0.0;
        for col in eps.column_iter() {
            for (e, s) in col.iter().zip(&self.sigma_eps) {
                quad += e * e / s;
            }
        }
        -0.5 * (self.n_e as f64 * self.log_det_2pi() + quad)
    }
}

/// A level-discretized forward model.
///
/// `evaluate` may assume its inputs were validated by [`eval_forward`].
pub trait ForwardModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_theta(&self) -> usize;
    fn dim_output(&self) -> usize;
    fn hierarchy(&self) -> &MeshHierarchy;
    fn max_level(&self) -> usize;

    fn evaluate(&self, theta: &[f64], level: usize) -> Result<DVector<f64>>;

    /// Analytic `J = -∇_θ g_ℓ(θ)` when available.
    fn analytic_jacobian(&self, _theta: &[f64], _level: usize) -> Option<DMatrix<f64>> {
        None
    }

    /// Box on which the model is defined, if any.
    fn bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

fn check_inputs(model: &dyn ForwardModel, theta: &[f64], level: usize) -> Result<()> {
    if theta.len() != model.dim_theta() {
        return Err(Error::Dimension {
            what: "theta",
            expected: model.dim_theta(),
            got: theta.len(),
        });
    }
    if level > model.max_level() {
        return Err(Error::LevelOutOfRange {
            level,
            max: model.max_level(),
        });
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain { theta: theta.to_vec() });
    }
    if let Some(bounds) = model.bounds() {
        if theta.iter().zip(&bounds).any(|(&x, &(lo, hi))| x < lo || x > hi) {
            return Err(Error::Domain { theta: theta.to_vec() });
        }
    }
    Ok(())
}

/// `g_ℓ(θ)` with level and support checks.
pub fn eval_forward(model: &dyn ForwardModel, theta: &[f64], level: usize) -> Result<DVector<f64>> {
    check_inputs(model, theta, level)?;
    model.evaluate(theta, level)
}

/// Where finite-difference stencils may go and how wide they are.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub widths: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl Stencil {
    pub const RELATIVE_STEP: f64 = 1e-5;

    pub fn unbounded(widths: Vec<f64>) -> Self {
        let bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); widths.len()];
        Self { widths, bounds }
    }
}

/// `J_ℓ(θ) = -∇_θ g_ℓ(θ)` and the number of model evaluations spent.
///
/// Exact for models with an analytic Jacobian, otherwise central differences
/// with step `1e-5 · width`, one-sided where the central stencil would leave
/// the support.
pub fn eval_jacobian(
    model: &dyn ForwardModel,
    theta: &[f64],
    level: usize,
    stencil: &Stencil,
) -> Result<(DMatrix<f64>, u64)> {
    check_inputs(model, theta, level)?;
    if let Some(j) = model.analytic_jacobian(theta, level) {
        return Ok((j, 1));
    }
    let d = theta.len();
    let q = model.dim_output();
    let mut jac = DMatrix::zeros(q, d);
    let mut evals = 0u64;
    let mut center: Option<DVector<f64>> = None;
    let mut point = theta.to_vec();

    for j in 0..d {
        let (lo, hi) = stencil.bounds[j];
        let mut step = Stencil::RELATIVE_STEP * stencil.widths[j];
        let mut attempt = 0;
        let column = loop {
            let up = theta[j] + step;
            let down = theta[j] - step;
            if up <= hi && down >= lo {
                point[j] = up;
                let gp = model.evaluate(&point, level)?;
                point[j] = down;
                let gm = model.evaluate(&point, level)?;
                evals += 2;
                break (gp - gm) / (up - down);
            }
            if up <= hi || down >= lo {
                if center.is_none() {
                    center = Some(model.evaluate(theta, level)?);
                    evals += 1;
                }
                let g0 = center.as_ref().unwrap();
                let x = if up <= hi { up } else { down };
                point[j] = x;
                let gx = model.evaluate(&point, level)?;
                evals += 1;
                break (gx - g0) / (x - theta[j]);
            }
            if attempt == 1 {
                return Err(Error::Stencil {
                    dim: j,
                    theta: theta.to_vec(),
                });
            }
            attempt += 1;
            step *= 0.5;
        };
        point[j] = theta[j];
        jac.set_column(j, &(-column));
    }
    Ok((jac, evals))
}

/// A forward model paired with the prior and noise of one experiment.
#[derive(Clone)]
pub struct Experiment {
    pub model: Arc<dyn ForwardModel>,
    pub prior: PriorSpec,
    pub noise: NoiseSpec,
    stencil: Stencil,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("model", &self.model.name())
            .field("prior", &self.prior)
            .field("noise", &self.noise)
            .finish()
    }
}

impl Experiment {
    pub fn new(model: Arc<dyn ForwardModel>, prior: PriorSpec, noise: NoiseSpec) -> Result<Self> {
        if prior.dim() != model.dim_theta() {
            return Err(Error::Dimension {
                what: "prior",
                expected: model.dim_theta(),
                got: prior.dim(),
            });
        }
        if noise.dim() != model.dim_output() {
            return Err(Error::Dimension {
                what: "noise",
                expected: model.dim_output(),
                got: noise.dim(),
            });
        }
        let mut bounds = prior.bounds();
        if let Some(mb) = model.bounds() {
            for (b, m) in bounds.iter_mut().zip(mb) {
                b.0 = b.0.max(m.0);
                b.1 = b.1.min(m.1);
            }
        }
        let stencil = Stencil {
            widths: prior.widths(),
            bounds,
        };
        Ok(Self {
            model,
            prior,
            noise,
            stencil,
        })
    }

    pub fn stencil(&self) -> &Stencil {
        &self.stencil
    }

    pub fn hierarchy(&self) -> &MeshHierarchy {
        self.model.hierarchy()
    }

    pub fn max_level(&self) -> usize {
        self.model.max_level()
    }

    pub fn dim_theta(&self) -> usize {
        self.prior.dim()
    }

    pub fn dim_output(&self) -> usize {
        self.noise.dim()
    }
}

/// Forward-model access that tallies evaluations per level.
pub struct Evaluator<'a> {
    pub experiment: &'a Experiment,
    counts: Vec<u64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(experiment: &'a Experiment) -> Self {
        Self {
            experiment,
            counts: vec![0; experiment.max_level() + 1],
        }
    }

    pub fn eval(&mut self, theta: &[f64], level: usize) -> Result<DVector<f64>> {
        let g = eval_forward(self.experiment.model.as_ref(), theta, level)?;
        self.counts[level] += 1;
        Ok(g)
    }

    pub fn jacobian(&mut self, theta: &[f64], level: usize) -> Result<DMatrix<f64>> {
        let (j, n) = eval_jacobian(self.experiment.model.as_ref(), theta, level, self.experiment.stencil())?;
        self.counts[level] += n;
        Ok(j)
    }

    /// Evaluations per level so far.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn take_counts(&mut self) -> Vec<u64> {
        std::mem::replace(&mut self.counts, vec![0; self.experiment.max_level() + 1])
    }
}

/// `Σ_k counts[k] · h_k^{-γ}`.
pub fn work_of_counts(hierarchy: &MeshHierarchy, counts: &[u64]) -> f64 {
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| c as f64 * hierarchy.work(k))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_hierarchy() -> MeshHierarchy {
        MeshHierarchy::new(1.0, 2, 2.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn work_model() {
        let h = unit_hierarchy();
        assert_eq!(work_of_level(&h, 0), 1.0);
        assert_eq!(work_of_level(&h, 3), 64.0);
        for l in 0..6 {
            assert!(h.h(l + 1) < h.h(l));
            assert!(h.work(l + 1) > h.work(l));
        }
    }

    #[test]
    fn hierarchy_rejects_bad_values() {
        assert!(MeshHierarchy::new(1.0, 1, 2.0, 1.0, 1.0).is_err());
        assert!(MeshHierarchy::new(1.0, 2, 0.0, 1.0, 1.0).is_err());
        assert!(MeshHierarchy::new(-1.0, 2, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn prior_validation_and_density() {
        assert!(PriorSpec::uniform(&[(1.0, 1.0)]).is_err());
        assert!(PriorSpec::gaussian(&[0.0], &[0.0]).is_err());
        let p = PriorSpec::uniform(&[(-2.0, 2.0)]).unwrap();
        assert!((p.log_density(&[0.3]) + 4f64.ln()).abs() < 1e-15);
        assert_eq!(p.log_density(&[2.5]), f64::NEG_INFINITY);
        let g = PriorSpec::gaussian(&[0.0], &[1.0]).unwrap();
        assert!((g.log_density(&[0.0]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseSpec::new(vec![1.0, 0.0], 1).is_err());
        assert!(NoiseSpec::new(vec![1.0], 0).is_err());
    }

    #[test]
    fn linear_identity_map() {
        let m = LinearGaussianModel::new(DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        for level in 0..3 {
            let g = eval_forward(&m, &[0.3], level).unwrap();
            assert_eq!(g.as_slice(), &[0.3]);
        }
    }

    #[test]
    fn constant_model_output() {
        let m = ConstantModel::new(vec![1.0, 2.0], 3);
        let g = eval_forward(&m, &[5.0, -1.0, 0.2], 0).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
        let (j, _) = eval_jacobian(&m, &[0.0, 0.0, 0.0], 0, &Stencil::unbounded(vec![1.0; 3])).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level_out_of_range_and_domain_errors() {
        let m = LinearGaussianModel::new(DMatrix::identity(1, 1))
            .unwrap()
            .with_max_level(2);
        assert!(matches!(
            eval_forward(&m, &[0.0], 3),
            Err(Error::LevelOutOfRange { level: 3, max: 2 })
        ));
        assert!(matches!(eval_forward(&m, &[f64::NAN], 0), Err(Error::Domain { .. })));
        assert!(matches!(eval_forward(&m, &[0.0, 1.0], 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn analytic_jacobian_is_minus_a() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let m = LinearGaussianModel::new(a.clone()).unwrap();
        let (j, _) = eval_jacobian(&m, &[0.1, 0.2], 0, &Stencil::unbounded(vec![1.0; 2])).unwrap();
        assert_eq!(j, -a);
    }

    #[test]
    fn cubic_jacobian_by_central_difference() {
        let m = ToyModel::cubic();
        let (j, evals) = eval_jacobian(&m, &[1.0], 0, &Stencil::unbounded(vec![1.0])).unwrap();
        assert_eq!(evals, 2);
        assert!((j[(0, 0)] + 3.0).abs() < 1e-6, "{}", j[(0, 0)]);
    }

    #[test]
    fn one_sided_at_boundary_then_error() {
        let m = ToyModel::cubic();
        let st = Stencil {
            widths: vec![1.0],
            bounds: vec![(0.0, 1.0)],
        };
        let (j, evals) = eval_jacobian(&m, &[1.0], 0, &st).unwrap();
        assert_eq!(evals, 2);
        assert!((j[(0, 0)] + 3.0).abs() < 1e-4);
        let narrow = Stencil {
            widths: vec![1.0],
            bounds: vec![(0.5, 0.5)],
        };
        assert!(matches!(
            eval_jacobian(&m, &[0.5], 0, &narrow),
            Err(Error::Stencil { dim: 0, .. })
        ));
    }

    #[test]
    fn jacobian_matches_half_step_estimate() {
        let m = ToyModel::default_model();
        let theta = [0.3, -0.4];
        let st = Stencil::unbounded(vec![1.0, 1.0]);
        let (j1, _) = eval_jacobian(&m, &theta, 2, &st).unwrap();
        let half = Stencil::unbounded(vec![0.5, 0.5]);
        let (j2, _) = eval_jacobian(&m, &theta, 2, &half).unwrap();
        // both O(step²) accurate; the difference is at the rounding floor
        assert!((j1 - j2).abs().max() < 1e-7);
    }

    #[test]
    fn evaluator_counts() {
        let exp = Experiment::new(
            Arc::new(ToyModel::default_model()),
            PriorSpec::gaussian(&[0.0, 0.0], &[0.25, 0.25]).unwrap(),
            NoiseSpec::new(vec![0.01, 0.01], 1).unwrap(),
        )
        .unwrap();
        let mut ev = Evaluator::new(&exp);
        ev.eval(&[0.0, 0.0], 1).unwrap();
        ev.jacobian(&[0.0, 0.0], 2).unwrap();
        assert_eq!(ev.counts()[1], 1);
        assert_eq!(ev.counts()[2], 4);
        let w = work_of_counts(exp.hierarchy(), ev.counts());
        assert_eq!(w, exp.hierarchy().work(1) + 4.0 * exp.hierarchy().work(2));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let m = ToyModel::default_model();
        let a = eval_forward(&m, &[0.1, 0.7], 3).unwrap();
        let b = eval_forward(&m, &[0.1, 0.7], 3).unwrap();
        assert_eq!(a, b);
    }
}
