//! Fixtures shared by the benchmarks.

use hdlr::model::{PopulationModel, RegressionInstance};
use hdlr::sampler::sample_instance;
use hdlr::spectra::covariance_eigenvalues;
use hdlr::SeedSpec;

/// Isotropic teacher draw with `theta0 ~ N(0, I)` and unit noise.
pub fn instance(n: usize, d: usize, seed: u64) -> RegressionInstance {
    let pop = PopulationModel::identity(d, 1.0, d as f64 / n as f64).expect("valid population");
    sample_instance(&pop, n, 1.0, true, SeedSpec::new(seed, 0)).expect("valid instance")
}

/// Eigenvalue samples of `C` for `members` independent designs.
pub fn spectra(n: usize, d: usize, members: usize) -> Vec<Vec<f64>> {
    (0..members)
        .map(|k| covariance_eigenvalues(instance(n, d, k as u64).design(), true).expect("spectrum"))
        .collect()
}
