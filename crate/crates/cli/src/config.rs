//! Run configuration: a TOML file with a `[model]` table and estimator
//! settings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mldl_core::forward_models::{
    closed_form_eig, EitModel, EitModelSpec, Experiment, LinearGaussianModel, NoiseSpec, PriorSpec, ToyModel,
};
use mldl_core::mldlmc::{MPolicy, PilotConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dlmc,
    Dlmcis,
    Mldlmc,
    Mldlsc,
}

impl EstimatorKind {
    pub fn needs_pilot(self) -> bool {
        !matches!(self, EstimatorKind::Mldlsc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `g(θ) = Aθ` with a Gaussian prior.
    LinearGaussian {
        a: Vec<Vec<f64>>,
        prior_mean: Vec<f64>,
        prior_variance: Vec<f64>,
        noise_variance: Vec<f64>,
        #[serde(default = "one")]
        n_e: usize,
    },
    /// Two-parameter cubic model with a planted discretization error.
    Toy {
        #[serde(default = "toy_prior_mean")]
        prior_mean: Vec<f64>,
        #[serde(default = "toy_prior_variance")]
        prior_variance: Vec<f64>,
        #[serde(default = "toy_noise")]
        noise_variance: Vec<f64>,
        #[serde(default = "one")]
        n_e: usize,
    },
    /// The four-ply laminate with ten electrodes.
    Eit {
        #[serde(default = "eit_noise")]
        noise_variance: f64,
        #[serde(default = "one")]
        n_e: usize,
    },
}

fn one() -> usize {
    1
}

fn toy_prior_mean() -> Vec<f64> {
    vec![0.0, 0.0]
}

fn toy_prior_variance() -> Vec<f64> {
    vec![0.25, 0.25]
}

fn toy_noise() -> Vec<f64> {
    vec![0.01, 0.01]
}

fn eit_noise() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MldlscSettings {
    #[serde(default)]
    pub beta2: Option<Vec<u32>>,
    #[serde(default = "default_max_beta")]
    pub max_beta: u32,
    #[serde(default)]
    pub max_work: Option<f64>,
}

fn default_max_beta() -> u32 {
    8
}

impl Default for MldlscSettings {
    fn default() -> Self {
        Self {
            beta2: None,
            max_beta: default_max_beta(),
            max_work: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub estimator: EstimatorKind,
    pub tol_list: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Caps the model's finest level.
    #[serde(default)]
    pub max_level: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub m_policy: MPolicy,
    #[serde(default)]
    pub pilot: PilotConfig,
    #[serde(default)]
    pub mldlsc: MldlscSettings,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file; a relative `output_dir` is taken relative to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        if self.tol_list.is_empty() {
            return bad("tol_list: must name at least one tolerance".into());
        }
        if let Some(t) = self.tol_list.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return bad(format!("tol_list: tolerances must be positive, got {t}"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha: must lie in (0, 1), got {}", self.alpha));
        }
        if self.repetitions == 0 {
            return bad("repetitions: must be at least 1".into());
        }
        if self.pilot.samples < 2 {
            return bad("pilot.samples: must be at least 2".into());
        }
        self.experiment().map(|_| ())
    }

    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        let field = |name: &'static str| move |e: mldl_core::Error| ConfigError(format!("model.{name}: {e}"));
        let noise = |v: &[f64], n_e: usize| NoiseSpec::new(v.to_vec(), n_e).map_err(field("noise_variance"));
        let exp = match &self.model {
            ModelConfig::LinearGaussian {
                a,
                prior_mean,
                prior_variance,
                noise_variance,
                n_e,
            } => {
                let a = matrix(a)?;
                let mut model = LinearGaussianModel::new(a).map_err(field("a"))?;
                if let Some(l) = self.max_level {
                    model = model.with_max_level(l);
                }
                let prior = PriorSpec::gaussian(prior_mean, prior_variance).map_err(field("prior_variance"))?;
                Experiment::new(Arc::new(model), prior, noise(noise_variance, *n_e)?)
            }
            ModelConfig::Toy {
                prior_mean,
                prior_variance,
                noise_variance,
                n_e,
            } => {
                let mut model = ToyModel::default_model();
                if let Some(l) = self.max_level {
                    model = model.with_max_level(l);
                }
                let prior = PriorSpec::gaussian(prior_mean, prior_variance).map_err(field("prior_variance"))?;
                Experiment::new(Arc::new(model), prior, noise(noise_variance, *n_e)?)
            }
            ModelConfig::Eit { noise_variance, n_e } => {
                let mut spec = EitModelSpec::laminate();
                if let Some(l) = self.max_level {
                    spec.max_level = l;
                }
                let prior = spec.prior.clone();
                let q = spec.electrodes.len() - 1;
                let model = EitModel::new(spec).map_err(field("kind"))?;
                Experiment::new(Arc::new(model), prior, noise(&vec![*noise_variance; q], *n_e)?)
            }
        };
        exp.map_err(|e| ConfigError(format!("model: {e}")))
    }

    /// Closed-form EIG when the model has one.
    pub fn reference_value(&self) -> Option<f64> {
        match &self.model {
            ModelConfig::LinearGaussian {
                a,
                prior_variance,
                noise_variance,
                n_e,
                ..
            } => {
                let a = matrix(a).ok()?;
                let st = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(prior_variance));
                let se = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(noise_variance));
                closed_form_eig(&a, &st, &se, *n_e).ok()
            }
            _ => None,
        }
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(ConfigError(
            "model.a: must be a non-empty rectangular list of rows".into(),
        ));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}
