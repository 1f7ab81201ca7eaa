//! Teacher-side generation of regression instances.
//!
//! Every draw comes from ChaCha20 keyed by the master seed, with the trial index as the
//! stream id and a fixed block offset per lane (design, theta0, noise, auxiliary). A trial
//! is therefore reproducible in isolation and independent of scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PopulationModel, RegressionInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_index: u64,
}

/// Disjoint sub-streams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Design = 0,
    Theta = 1,
    Noise = 2,
    Aux = 3,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        SeedSpec { master_seed, stream_index }
    }

    /// Seed for a derived experiment (e.g. a second sweep sharing the master seed).
    pub fn child(self, salt: u64) -> Self {
        SeedSpec { master_seed: splitmix64(self.master_seed ^ splitmix64(salt)), stream_index: self.stream_index }
    }

    /// Generator for one lane. Lanes start 2^64 words apart, so they never overlap.
    pub fn rng(self, lane: Lane) -> ChaCha20Rng {
        let mut key = [0u8; 32];
        let mut state = self.master_seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(self.stream_index);
        rng.set_word_pos((lane as u128) << 64);
        rng
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn normal_vec(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Lower Cholesky factor, failing on a non-positive pivot.
pub(crate) fn cholesky_factor(sigma_pop: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma_pop.is_square() {
        return Err(Error::Shape("population covariance must be square".into()));
    }
    nalgebra::Cholesky::new(sigma_pop.clone())
        .map(|c| c.l())
        .ok_or(Error::CovarianceNotPd)
}

fn is_identity(m: &DMatrix<f64>) -> bool {
    m.iter().enumerate().all(|(k, &x)| {
        let (i, j) = (k % m.nrows(), k / m.nrows());
        x == if i == j { 1.0 } else { 0.0 }
    })
}

/// `N x d` design with i.i.d. `N(0, Sigma)` rows, divided by `sqrt(d)` when `scaled`.
pub fn sample_design(
    n: usize,
    d: usize,
    sigma_pop: &DMatrix<f64>,
    scaled: bool,
    seed: SeedSpec,
) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::Shape(format!("design dimensions must be positive, got {n} x {d}")));
    }
    if sigma_pop.nrows() != d || sigma_pop.ncols() != d {
        return Err(Error::Shape(format!(
            "population covariance is {}x{}, expected {d}x{d}",
            sigma_pop.nrows(),
            sigma_pop.ncols()
        )));
    }
    let mut rng = seed.rng(Lane::Design);
    // Row-major fill so that the first rows do not depend on N.
    let mut g = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            g[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let mut z = if is_identity(sigma_pop) {
        g
    } else {
        let l = cholesky_factor(sigma_pop)?;
        g * l.transpose()
    };
    if scaled {
        z /= (d as f64).sqrt();
    }
    Ok(z)
}

/// `theta0 ~ N(0, S^2 I_d)`; the zero vector when `S^2 = 0`.
pub fn sample_theta0(d: usize, theta_prior_var: f64, seed: SeedSpec) -> Result<DVector<f64>> {
    if !(theta_prior_var >= 0.0 && theta_prior_var.is_finite()) {
        return Err(Error::Domain(format!("theta_prior_var must be nonnegative, got {theta_prior_var}")));
    }
    if theta_prior_var == 0.0 {
        return Ok(DVector::zeros(d));
    }
    let mut rng = seed.rng(Lane::Theta);
    Ok(normal_vec(&mut rng, d) * theta_prior_var.sqrt())
}

/// `eps ~ N(0, sigma0^2 I_N)`.
pub fn sample_noise(n: usize, sigma0_sq: f64, seed: SeedSpec) -> Result<DVector<f64>> {
    if !(sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
        return Err(Error::Domain(format!("sigma0_sq must be positive, got {sigma0_sq}")));
    }
    let mut rng = seed.rng(Lane::Noise);
    Ok(normal_vec(&mut rng, n) * sigma0_sq.sqrt())
}

/// `t = Z theta0 + eps`.
pub fn sample_targets(
    design: &DMatrix<f64>,
    theta0: &DVector<f64>,
    sigma0_sq: f64,
    seed: SeedSpec,
) -> Result<DVector<f64>> {
    let clean = noiseless_targets(design, theta0)?;
    Ok(clean + sample_noise(design.nrows(), sigma0_sq, seed)?)
}

/// `t = Z theta0` exactly.
pub fn noiseless_targets(design: &DMatrix<f64>, theta0: &DVector<f64>) -> Result<DVector<f64>> {
    if design.ncols() != theta0.len() {
        return Err(Error::Shape(format!(
            "design has {} columns but theta0 has length {}",
            design.ncols(),
            theta0.len()
        )));
    }
    Ok(design * theta0)
}

/// One full teacher draw at sample size `n` from a population model.
pub fn sample_instance(
    pop: &PopulationModel,
    n: usize,
    sigma0_sq: f64,
    scaled: bool,
    seed: SeedSpec,
) -> Result<RegressionInstance> {
    let design = sample_design(n, pop.d(), pop.sigma_pop(), scaled, seed)?;
    let theta0 = sample_theta0(pop.d(), pop.theta_prior_var(), seed)?;
    let targets = sample_targets(&design, &theta0, sigma0_sq, seed)?;
    RegressionInstance::new(design, targets, theta0, sigma0_sq, scaled)
}

/// Fresh noise on a fixed design and teacher.
pub fn resample_noise(instance: &RegressionInstance, seed: SeedSpec) -> Result<RegressionInstance> {
    let targets = sample_targets(instance.design(), instance.theta0(), instance.sigma0_sq(), seed)?;
    RegressionInstance::new(
        instance.design().clone(),
        targets,
        instance.theta0().clone(),
        instance.sigma0_sq(),
        instance.scaled(),
    )
}
