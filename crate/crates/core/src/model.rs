//! Domain types shared by every module.
//!
//! Conventions: the design `Z` is `N x d` with rows `z_i`, targets `t = Z theta0 + eps`,
//! `J = Z^T Z` and `J_{s} = J + s I`. When an instance is `scaled`, the entries of `Z` have
//! been divided by `sqrt(d)`, so that `J = C / zeta` with `C = Z0^T Z0 / N` the sample
//! covariance of the unscaled rows and `zeta = d / N`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Inverse temperature. `Infinite` is the zero-temperature (MAP/ML) limit and is handled by
/// exact formulas rather than by a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn new(beta: f64) -> Result<Self> {
        if beta == f64::INFINITY {
            Ok(Beta::Infinite)
        } else if beta.is_finite() && beta > 0.0 {
            Ok(Beta::Finite(beta))
        } else {
            Err(Error::Domain(format!("beta must be positive, got {beta}")))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Beta::Finite(b) => b,
            Beta::Infinite => f64::INFINITY,
        }
    }

    /// `T = 1/beta`, zero at infinite beta.
    pub fn temperature(self) -> f64 {
        match self {
            Beta::Finite(b) => 1.0 / b,
            Beta::Infinite => 0.0,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Beta::Finite(_))
    }

    /// `beta / (beta - zeta)`, equal to 1 at infinite beta.
    pub(crate) fn ratio(self, zeta: f64) -> f64 {
        match self {
            Beta::Finite(b) => b / (b - zeta),
            Beta::Infinite => 1.0,
        }
    }

    /// `1 / (beta - zeta)`, equal to 0 at infinite beta.
    pub(crate) fn inv_gap(self, zeta: f64) -> f64 {
        match self {
            Beta::Finite(b) => 1.0 / (b - zeta),
            Beta::Infinite => 0.0,
        }
    }

    pub(crate) fn check_above(self, zeta: f64) -> Result<()> {
        match self {
            Beta::Finite(b) if b <= zeta => Err(Error::TemperatureOutOfRange { beta: b, zeta }),
            _ => Ok(()),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let beta = match Raw::deserialize(d)? {
            Raw::Num(b) => b,
            Raw::Str(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => f64::INFINITY,
            Raw::Str(s) => return Err(serde::de::Error::custom(format!("invalid beta '{s}'"))),
        };
        Beta::new(beta).map_err(serde::de::Error::custom)
    }
}

/// Prior on the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoisePrior {
    /// Improper flat prior, zero log-density derivative.
    Flat,
    /// Point mass; pins `sigma^2 = sigma_sq` and is never differentiated.
    Delta { sigma_sq: f64 },
    /// Inverse-gamma density `~ (sigma^2)^(-shape-1) exp(-rate / sigma^2)`.
    InverseGamma { shape: f64, rate: f64 },
}

impl NoisePrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoisePrior::Flat => Ok(()),
            NoisePrior::Delta { sigma_sq } if sigma_sq > 0.0 && sigma_sq.is_finite() => Ok(()),
            NoisePrior::InverseGamma { shape, rate }
                if shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite() =>
            {
                Ok(())
            }
            other => Err(Error::Domain(format!("invalid noise prior {other:?}"))),
        }
    }

    /// The pinned value of a point-mass prior.
    pub fn pinned(&self) -> Option<f64> {
        match *self {
            NoisePrior::Delta { sigma_sq } => Some(sigma_sq),
            _ => None,
        }
    }

    /// Unnormalized `log P(sigma^2)`. Not defined for the point mass.
    pub fn log_density(&self, sigma_sq: f64) -> f64 {
        match *self {
            NoisePrior::Flat => 0.0,
            NoisePrior::Delta { .. } => f64::NAN,
            NoisePrior::InverseGamma { shape, rate } => {
                -(shape + 1.0) * sigma_sq.ln() - rate / sigma_sq
            }
        }
    }

    /// `d/d sigma^2 log P(sigma^2)`. Returns 0 for the point mass, which callers handle
    /// separately through [`NoisePrior::pinned`].
    pub fn log_density_derivative(&self, sigma_sq: f64) -> f64 {
        match *self {
            NoisePrior::Flat | NoisePrior::Delta { .. } => 0.0,
            NoisePrior::InverseGamma { shape, rate } => {
                -(shape + 1.0) / sigma_sq + rate / (sigma_sq * sigma_sq)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub beta: Beta,
    pub eta: f64,
    pub noise_prior: NoisePrior,
}

impl HyperParams {
    pub fn new(beta: Beta, eta: f64, noise_prior: NoisePrior) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Domain(format!("eta must be a finite nonnegative number, got {eta}")));
        }
        noise_prior.validate()?;
        Ok(HyperParams { beta, eta, noise_prior })
    }
}

/// One teacher draw `(Z, t, theta0, sigma0^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionInstance {
    design: DMatrix<f64>,
    targets: DVector<f64>,
    theta0: DVector<f64>,
    sigma0_sq: f64,
    scaled: bool,
}

impl RegressionInstance {
    pub fn new(
        design: DMatrix<f64>,
        targets: DVector<f64>,
        theta0: DVector<f64>,
        sigma0_sq: f64,
        scaled: bool,
    ) -> Result<Self> {
        if targets.len() != design.nrows() {
            return Err(Error::Shape(format!(
                "targets have length {} but design has {} rows",
                targets.len(),
                design.nrows()
            )));
        }
        if theta0.len() != design.ncols() {
            return Err(Error::Shape(format!(
                "theta0 has length {} but design has {} columns",
                theta0.len(),
                design.ncols()
            )));
        }
        if design.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("design"));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("targets"));
        }
        if theta0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("theta0"));
        }
        if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::Domain(format!("sigma0_sq must be positive, got {sigma0_sq}")));
        }
        Ok(RegressionInstance { design, targets, theta0, sigma0_sq, scaled })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }
    pub fn theta0(&self) -> &DVector<f64> {
        &self.theta0
    }
    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }
    pub fn scaled(&self) -> bool {
        self.scaled
    }
    pub fn n(&self) -> usize {
        self.design.nrows()
    }
    pub fn d(&self) -> usize {
        self.design.ncols()
    }
    pub fn zeta(&self) -> f64 {
        self.d() as f64 / self.n() as f64
    }

    /// The realized noise `t - Z theta0`.
    pub fn noise(&self) -> DVector<f64> {
        &self.targets - &self.design * &self.theta0
    }

    /// Same instance with rows permuted by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::Shape("permutation length differs from N".into()));
        }
        let design = DMatrix::from_fn(self.n(), self.d(), |i, j| self.design[(perm[i], j)]);
        let targets = DVector::from_fn(self.n(), |i, _| self.targets[perm[i]]);
        Self::new(design, targets, self.theta0.clone(), self.sigma0_sq, self.scaled)
    }
}

/// Population-level description of the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    sigma_pop: DMatrix<f64>,
    theta_prior_var: f64,
    zeta: f64,
}

impl PopulationModel {
    pub fn new(sigma_pop: DMatrix<f64>, theta_prior_var: f64, zeta: f64) -> Result<Self> {
        if !sigma_pop.is_square() {
            return Err(Error::Shape("population covariance must be square".into()));
        }
        if sigma_pop.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("population covariance"));
        }
        let d = sigma_pop.nrows();
        for i in 0..d {
            for j in 0..i {
                if (sigma_pop[(i, j)] - sigma_pop[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Domain("population covariance is not symmetric".into()));
                }
            }
        }
        let min_eig = sigma_pop.clone().symmetric_eigenvalues().min();
        if min_eig <= 0.0 {
            return Err(Error::CovarianceNotPd);
        }
        if !(theta_prior_var >= 0.0 && theta_prior_var.is_finite()) {
            return Err(Error::Domain("theta_prior_var must be nonnegative".into()));
        }
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::Domain(format!("zeta must lie in (0, 1), got {zeta}")));
        }
        Ok(PopulationModel { sigma_pop, theta_prior_var, zeta })
    }

    pub fn identity(d: usize, theta_prior_var: f64, zeta: f64) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), theta_prior_var, zeta)
    }

    pub fn sigma_pop(&self) -> &DMatrix<f64> {
        &self.sigma_pop
    }
    pub fn theta_prior_var(&self) -> f64 {
        self.theta_prior_var
    }
    pub fn zeta(&self) -> f64 {
        self.zeta
    }
    pub fn d(&self) -> usize {
        self.sigma_pop.nrows()
    }

    /// Sample size implied by `zeta = d / N`.
    pub fn n(&self) -> usize {
        (self.d() as f64 / self.zeta).round() as usize
    }

    /// Ascending eigenvalues of the population covariance.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.sigma_pop.clone().symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }
}

/// Eigenvalue density of the sample covariance `C = Z0^T Z0 / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralDensity {
    /// Empirical density: equal point masses at the sorted eigenvalues.
    Samples { eigenvalues: Vec<f64> },
    /// Marchenko-Pastur law with aspect ratio `zeta`.
    MarchenkoPastur { zeta: f64 },
    /// Piecewise-constant density given by bin edges and bin masses.
    Histogram { edges: Vec<f64>, masses: Vec<f64> },
}

impl SpectralDensity {
    pub fn samples(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Data("empty eigenvalue list".into()));
        }
        if eigenvalues.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("eigenvalues"));
        }
        if eigenvalues.iter().any(|&x| x < 0.0) {
            return Err(Error::Data("negative eigenvalue in a covariance spectrum".into()));
        }
        eigenvalues.sort_by(f64::total_cmp);
        Ok(SpectralDensity::Samples { eigenvalues })
    }

    pub fn marchenko_pastur(zeta: f64) -> Result<Self> {
        if !(zeta > 0.0 && zeta < 1.0) {
            return Err(Error::Domain(format!("zeta must lie in (0, 1), got {zeta}")));
        }
        Ok(SpectralDensity::MarchenkoPastur { zeta })
    }

    pub fn histogram(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if edges.len() != masses.len() + 1 || masses.is_empty() {
            return Err(Error::Shape("histogram needs one more edge than masses".into()));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("histogram edges must increase".into()));
        }
        if edges[0] < 0.0 {
            return Err(Error::Data("histogram support must be nonnegative".into()));
        }
        if masses.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::Data("histogram masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Data(format!("histogram masses sum to {total}, not 1")));
        }
        Ok(SpectralDensity::Histogram { edges, masses })
    }

    /// Pools several empirical spectra into one (the ensemble-averaged density).
    pub fn pooled<'a>(spectra: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let all: Vec<f64> = spectra.into_iter().flat_map(|s| s.iter().copied()).collect();
        Self::samples(all)
    }
}

/// Helmholtz decomposition of the conditional free energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyBreakdown {
    pub free_energy: f64,
    pub avg_energy: f64,
    pub entropy: f64,
    pub temperature: f64,
}

impl FreeEnergyBreakdown {
    /// Relative defect of `F = E - T S`.
    pub fn helmholtz_defect(&self) -> f64 {
        let rhs = self.avg_energy - self.temperature * self.entropy;
        let scale = self.free_energy.abs().max(self.avg_energy.abs()).max(f64::MIN_POSITIVE);
        (self.free_energy - rhs).abs() / scale
    }

    pub fn per_sample(&self, n: usize) -> Self {
        let n = n as f64;
        FreeEnergyBreakdown {
            free_energy: self.free_energy / n,
            avg_energy: self.avg_energy / n,
            entropy: self.entropy / n,
            temperature: self.temperature,
        }
    }
}

/// A free-energy value that may be `-infinity` in the high-temperature phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeValue {
    Finite(f64),
    Divergent,
}

impl FeValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            FeValue::Finite(v) => Some(v),
            FeValue::Divergent => None,
        }
    }
    pub fn is_divergent(self) -> bool {
        matches!(self, FeValue::Divergent)
    }
}

/// One branch of the MSE deviation rate function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFunctionEval {
    pub alpha: f64,
    pub saddle: f64,
    /// Rate at `delta = 0`; the `delta` dependence is linear and added downstream.
    pub rate: f64,
    pub valid_alpha_range: (f64, f64),
}
