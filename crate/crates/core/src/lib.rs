//! Finite-size and asymptotic theory of Bayesian linear regression in the teacher-student
//! setting, together with a Monte Carlo harness that checks every closed form.
//!
//! The design `Z` is `N x d`, targets are `t = Z theta0 + eps` with Gaussian noise, and the
//! student infers `(theta, sigma^2)` at inverse temperature `beta` with ridge strength `eta`.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod error;
pub mod estimators;
pub mod freenergy;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod quad;
pub mod sampler;
pub mod spectra;
pub mod stats;

pub use nalgebra;
pub use num_complex::Complex64;

pub use analytics::{MseDeviationBound, StudentTMarginal, TailBound};
pub use error::{Error, Result};
pub use estimators::{GaussianLaw, SigmaSolve, SolverOptions};
pub use freenergy::FreeEnergyCurvePoint;
pub use model::{
    Beta, FeValue, FreeEnergyBreakdown, HyperParams, NoisePrior, PopulationModel,
    RateFunctionEval, RegressionInstance, SpectralDensity,
};
pub use sampler::SeedSpec;
pub use spectra::CorrelationKernel;

