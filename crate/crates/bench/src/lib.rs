//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use mldl_core::forward_models::{
    EitModel, EitModelSpec, Experiment, LinearGaussianModel, NoiseSpec, PriorSpec, ToyModel,
};
use nalgebra::DMatrix;

pub fn linear() -> Experiment {
    Experiment::new(
        Arc::new(LinearGaussianModel::new(DMatrix::from_element(1, 1, 1.0)).expect("valid matrix")),
        PriorSpec::gaussian(&[0.0], &[1.0]).expect("valid prior"),
        NoiseSpec::new(vec![1.0], 1).expect("valid noise"),
    )
    .expect("consistent experiment")
}

pub fn toy() -> Experiment {
    Experiment::new(
        Arc::new(ToyModel::default_model()),
        PriorSpec::gaussian(&[0.0, 0.0], &[0.25, 0.25]).expect("valid prior"),
        NoiseSpec::new(vec![0.01, 0.01], 1).expect("valid noise"),
    )
    .expect("consistent experiment")
}

pub fn eit() -> Experiment {
    let model = EitModel::new(EitModelSpec::laminate()).expect("valid laminate");
    let prior = model.spec().prior.clone();
    Experiment::new(
        Arc::new(model),
        prior,
        NoiseSpec::new(vec![1e-4; 9], 1).expect("valid noise"),
    )
    .expect("consistent experiment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        assert_eq!(linear().dim_theta(), 1);
        assert_eq!(toy().dim_output(), 2);
        assert_eq!(eit().dim_output(), 9);
    }
}
