//! Experiment configuration: a JSON document with defaults for every optional field.
//!
//! ```json
//! {
//!   "n": 400, "d": 200, "trials": 2000,
//!   "sigma0_sq": 1.0, "theta_prior_var": 0.0, "eta": 0.0, "beta": "inf",
//!   "sigma_pop": { "kind": "identity" },
//!   "prior": { "kind": "flat" },
//!   "master_seed": 7,
//!   "checks": ["noise-mean", "noise-var"]
//! }
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Beta, NoisePrior, PopulationModel};

/// Population covariance of the design rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaPopSpec {
    #[default]
    Identity,
    Diagonal {
        values: Vec<f64>,
    },
    /// JSON file holding a row-major `d x d` array of arrays.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: OutputFormat,
}

/// Check-specific knobs. Every field has the default used by the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckParams {
    /// `alpha` of the residual MGF check.
    pub mgf_alpha: f64,
    /// Arguments of the noise and MSE characteristic-function checks.
    pub cf_points: Vec<f64>,
    /// `delta` of the noise tail-bound check.
    pub tail_delta: f64,
    /// `delta` of the MSE deviation-decay check, absolute.
    pub mse_delta: f64,
    /// Coordinate used by the one-dimensional distribution checks.
    pub coordinate: usize,
    /// Histogram bins of the spectral correlation kernel; `None` picks Freedman-Diaconis.
    pub kernel_bins: Option<usize>,
    /// Realizations per size in the recursion self-averaging check.
    pub self_averaging_trials: usize,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            mgf_alpha: 0.1,
            cf_points: vec![0.1, 0.3],
            tail_delta: 0.2,
            mse_delta: 0.25,
            coordinate: 0,
            kernel_bins: None,
            self_averaging_trials: 400,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn infinite() -> Beta {
    Beta::Infinite
}
fn flat() -> NoisePrior {
    NoisePrior::Flat
}
fn yes() -> bool {
    true
}
fn three() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    #[serde(default = "one")]
    pub sigma0_sq: f64,
    /// Teacher prior variance `S^2`; zero pins `theta0 = 0`.
    #[serde(default)]
    pub theta_prior_var: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "infinite")]
    pub beta: Beta,
    /// Student noise variance for conditional free energies; defaults to `sigma0_sq`.
    #[serde(default)]
    pub sigma_sq: Option<f64>,
    #[serde(default)]
    pub sigma_pop: SigmaPopSpec,
    #[serde(default = "flat")]
    pub prior: NoisePrior,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub output: Option<OutputSpec>,
    /// Divide design entries by `sqrt(d)`.
    #[serde(default = "yes")]
    pub scaled: bool,
    /// Trials allowed to fail before the run aborts.
    #[serde(default)]
    pub failure_budget: usize,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "three")]
    pub z_threshold: f64,
    #[serde(default)]
    pub params: CheckParams,
}

impl ExperimentConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(n: usize, d: usize, trials: usize) -> Self {
        ExperimentConfig {
            n,
            d,
            trials,
            sigma0_sq: 1.0,
            theta_prior_var: 0.0,
            eta: 0.0,
            beta: Beta::Infinite,
            sigma_sq: None,
            sigma_pop: SigmaPopSpec::Identity,
            prior: NoisePrior::Flat,
            master_seed: 0,
            checks: vec![],
            output: None,
            scaled: true,
            failure_budget: 0,
            workers: None,
            z_threshold: 3.0,
            params: CheckParams::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.d < 1 || self.d >= self.n {
            return Err(Error::Config(format!("need 1 <= d < n, got n = {}, d = {}", self.n, self.d)));
        }
        for (name, x) in [("sigma0_sq", self.sigma0_sq), ("z_threshold", self.z_threshold)] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {x}")));
            }
        }
        if !(self.theta_prior_var >= 0.0 && self.theta_prior_var.is_finite()) {
            return Err(Error::Config("theta_prior_var must be nonnegative".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("eta must be nonnegative".into()));
        }
        if let Some(s) = self.sigma_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma_sq must be positive, got {s}")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.prior.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let SigmaPopSpec::Diagonal { values } = &self.sigma_pop {
            if values.len() != self.d {
                return Err(Error::Config(format!("diagonal sigma_pop has {} entries, d = {}", values.len(), self.d)));
            }
        }
        Ok(())
    }

    pub fn zeta(&self) -> f64 {
        self.d as f64 / self.n as f64
    }

    /// Student noise variance used by conditional free energies.
    pub fn student_sigma_sq(&self) -> f64 {
        self.sigma_sq.unwrap_or(self.sigma0_sq)
    }

    pub fn sigma_pop_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.d;
        match &self.sigma_pop {
            SigmaPopSpec::Identity => Ok(DMatrix::identity(d, d)),
            SigmaPopSpec::Diagonal { values } => Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(values.clone()))),
            SigmaPopSpec::File { path } => {
                let rows: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("{} does not hold a {d} x {d} matrix", path.display())));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }

    pub fn population(&self) -> Result<PopulationModel> {
        PopulationModel::new(self.sigma_pop_matrix()?, self.theta_prior_var, self.zeta())
    }

    /// SHA-256 of the canonical JSON serialization (defaults filled in).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
