use nalgebra::{Cholesky, DMatrix, DVector};

use super::{ForwardModel, MeshHierarchy};
use crate::error::{Error, Result};

const DEFAULT_MAX_LEVEL: usize = 8;

fn flat_hierarchy() -> MeshHierarchy {
    MeshHierarchy::new(1.0, 2, 2.0, 1.0, 1.0).expect("valid default hierarchy")
}

/// `g_ℓ(θ) = Aθ` at every level.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    a: DMatrix<f64>,
    hierarchy: MeshHierarchy,
    max_level: usize,
}

impl LinearGaussianModel {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Config("linear model matrix must be non-empty".into()));
        }
        Ok(Self {
            a,
            hierarchy: flat_hierarchy(),
            max_level: DEFAULT_MAX_LEVEL,
        })
    }

    pub fn with_max_level(mut self, max_level: usize) -> Self {
        self.max_level = max_level;
        self
    }

    pub fn with_hierarchy(mut self, hierarchy: MeshHierarchy) -> Self {
        self.hierarchy = hierarchy;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl ForwardModel for LinearGaussianModel {
    fn name(&self) -> &str {
        "linear_gaussian"
    }
    fn dim_theta(&self) -> usize {
        self.a.ncols()
    }
    fn dim_output(&self) -> usize {
        self.a.nrows()
    }
    fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }
    fn max_level(&self) -> usize {
        self.max_level
    }

    fn evaluate(&self, theta: &[f64], _level: usize) -> Result<DVector<f64>> {
        Ok(&self.a * DVector::from_column_slice(theta))
    }

    fn analytic_jacobian(&self, _theta: &[f64], _level: usize) -> Option<DMatrix<f64>> {
        Some(-&self.a)
    }
}

/// `g_ℓ(θ) = c`: the data carry no information about `θ`.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    value: DVector<f64>,
    dim_theta: usize,
    hierarchy: MeshHierarchy,
    max_level: usize,
}

impl ConstantModel {
    pub fn new(value: Vec<f64>, dim_theta: usize) -> Self {
        Self {
            value: DVector::from_vec(value),
            dim_theta,
            hierarchy: flat_hierarchy(),
            max_level: DEFAULT_MAX_LEVEL,
        }
    }
}

impl ForwardModel for ConstantModel {
    fn name(&self) -> &str {
        "constant"
    }
    fn dim_theta(&self) -> usize {
        self.dim_theta
    }
    fn dim_output(&self) -> usize {
        self.value.len()
    }
    fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }
    fn max_level(&self) -> usize {
        self.max_level
    }

    fn evaluate(&self, _theta: &[f64], _level: usize) -> Result<DVector<f64>> {
        Ok(self.value.clone())
    }

    fn analytic_jacobian(&self, _theta: &[f64], _level: usize) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.value.len(), self.dim_theta))
    }
}

/// Exact EIG of `Y = Aθ + ε` under `θ ~ N(μ, Σ_θ)`:
/// `½ log det(I_d + N_e Aᵀ Σ_ε⁻¹ A Σ_θ)`.
pub fn closed_form_eig(
    a: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
    sigma_eps: &DMatrix<f64>,
    n_e: usize,
) -> Result<f64> {
    let chol_theta = Cholesky::new(sigma_theta.clone()).ok_or_else(|| Error::Decomposition {
        context: "prior covariance".into(),
    })?;
    let chol_eps = Cholesky::new(sigma_eps.clone()).ok_or_else(|| Error::Decomposition {
        context: "noise covariance".into(),
    })?;
    // Symmetric form: I + N_e (L_e⁻¹ A L_θ)ᵀ (L_e⁻¹ A L_θ) has the same determinant.
    let al = a * chol_theta.l();
    let whitened = chol_eps
        .l()
        .solve_lower_triangular(&al)
        .ok_or_else(|| Error::Decomposition {
            context: "noise covariance factor".into(),
        })?;
    let d = a.ncols();
    let m = DMatrix::identity(d, d) + whitened.transpose() * &whitened * n_e as f64;
    let chol = Cholesky::new(m).ok_or_else(|| Error::Decomposition {
        context: "information matrix".into(),
    })?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * log_det)
}
