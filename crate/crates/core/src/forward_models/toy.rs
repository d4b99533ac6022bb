use nalgebra::{DMatrix, DVector};

use super::{ForwardModel, MeshHierarchy};
use crate::error::{Error, Result};

/// Smooth nonlinear model with a synthetic discretization error:
///
/// `g_ℓ(θ)_i = Σ_j (a_ij + c · h_ℓ^r · p_ij) θ_j + b_ij θ_j³`
///
/// The perturbation changes the sensitivity of the outputs, so both the
/// model and its EIG converge at the planted rate `r` as `h_ℓ → 0`; a
/// constant offset would leave the EIG untouched. The Jacobian is taken by
/// finite differences, like a black-box solver.
#[derive(Debug, Clone)]
pub struct ToyModel {
    linear: DMatrix<f64>,
    cubic: DMatrix<f64>,
    perturbation: DMatrix<f64>,
    amplitude: f64,
    planted_rate: f64,
    hierarchy: MeshHierarchy,
    max_level: usize,
}

impl ToyModel {
    pub fn new(
        linear: DMatrix<f64>,
        cubic: DMatrix<f64>,
        perturbation: DMatrix<f64>,
        amplitude: f64,
        planted_rate: f64,
        hierarchy: MeshHierarchy,
        max_level: usize,
    ) -> Result<Self> {
        let shape = linear.shape();
        if shape.0 == 0 || shape.1 == 0 || cubic.shape() != shape || perturbation.shape() != shape {
            return Err(Error::Config(
                "toy model coefficient matrices must share a non-empty shape".into(),
            ));
        }
        if !(planted_rate > 0.0) {
            return Err(Error::Config("toy planted rate must be positive".into()));
        }
        Ok(Self {
            linear,
            cubic,
            perturbation,
            amplitude,
            planted_rate,
            hierarchy,
            max_level,
        })
    }

    /// Two parameters, two outputs, rate 1.5, work exponent 2.
    pub fn default_model() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            0.1,
            1.5,
            MeshHierarchy::new(1.0, 2, 2.0, 1.5, 1.5).expect("valid"),
            12,
        )
        .expect("valid toy model")
    }

    /// `g(θ) = θ³` with no level dependence.
    pub fn cubic() -> Self {
        Self::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            0.0,
            1.0,
            MeshHierarchy::new(1.0, 2, 2.0, 1.0, 1.0).expect("valid"),
            12,
        )
        .expect("valid toy model")
    }

    /// The `h → 0` limit model (no discretization error).
    pub fn limit(&self) -> Self {
        Self {
            amplitude: 0.0,
            ..self.clone()
        }
    }

    pub fn planted_rate(&self) -> f64 {
        self.planted_rate
    }

    pub fn with_max_level(mut self, max_level: usize) -> Self {
        self.max_level = max_level;
        self
    }
}

impl ForwardModel for ToyModel {
    fn name(&self) -> &str {
        "toy"
    }
    fn dim_theta(&self) -> usize {
        self.linear.ncols()
    }
    fn dim_output(&self) -> usize {
        self.linear.nrows()
    }
    fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }
    fn max_level(&self) -> usize {
        self.max_level
    }

    fn evaluate(&self, theta: &[f64], level: usize) -> Result<DVector<f64>> {
        let scale = self.amplitude * self.hierarchy.h(level).powf(self.planted_rate);
        let q = self.dim_output();
        Ok(DVector::from_fn(q, |i, _| {
            theta
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    (self.linear[(i, j)] + scale * self.perturbation[(i, j)]) * t + self.cubic[(i, j)] * t * t * t
                })
                .sum()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::eval_forward;

    #[test]
    fn perturbation_decays_at_planted_rate() {
        let m = ToyModel::default_model();
        let lim = m.limit();
        let theta = [0.4, -0.3];
        let err: Vec<f64> = (0..6)
            .map(|l| (eval_forward(&m, &theta, l).unwrap() - eval_forward(&lim, &theta, 0).unwrap()).norm())
            .collect();
        for w in err.windows(2) {
            assert!((w[0] / w[1] - 2f64.powf(1.5)).abs() < 1e-9);
        }
    }
}
