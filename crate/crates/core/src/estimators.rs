//! Student-side estimators: ridge/ML point estimates, the Gibbs conditional law, the
//! noise-variance fixed point and its self-averaging recursion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freenergy::SigmaMarginal;
use crate::linalg::{gram, ridge_cholesky, SpectralView};
use crate::model::{Beta, NoisePrior, RegressionInstance, SpectralDensity};
use crate::quad::integrate_on;
use crate::sampler::normal_vec;
use crate::spectra::{spectral_integral, CorrelationKernel};

/// Multivariate normal law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::Shape("covariance shape differs from mean length".into()));
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        if (&covariance - covariance.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        if nalgebra::Cholesky::new(covariance.clone()).is_none() {
            return Err(Error::CovarianceNotPd);
        }
        Ok(GaussianLaw { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and variance of coordinate `j`.
    pub fn marginal(&self, j: usize) -> (f64, f64) {
        (self.mean[j], self.covariance[(j, j)])
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let l = nalgebra::Cholesky::new(self.covariance.clone()).expect("validated PD").l();
        &self.mean + l * normal_vec(rng, self.dim())
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let chol = nalgebra::Cholesky::new(self.covariance.clone()).expect("validated PD");
        let r = x - &self.mean;
        let q = r.dot(&chol.solve(&r));
        -0.5 * (q + crate::linalg::chol_logdet(&chol) + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Outcome of a noise-variance fixed-point solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSolve {
    pub sigma_sq: f64,
    pub iterations: usize,
    /// Relative defect `|Psi(v) - v| / v` at the returned iterate.
    pub residual: f64,
}

/// Damped fixed-point iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 500, damping: 0.5 }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("eta must be a finite nonnegative number, got {eta}")));
    }
    Ok(())
}

fn check_sigma(sigma_sq: f64) -> Result<()> {
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::Domain(format!("sigma^2 must be positive, got {sigma_sq}")));
    }
    Ok(())
}

/// `theta_hat = (J + sigma^2 eta I)^{-1} Z^T t`.
pub fn map_estimate(instance: &RegressionInstance, sigma_sq: f64, eta: f64) -> Result<DVector<f64>> {
    check_eta(eta)?;
    check_sigma(sigma_sq)?;
    crate::linalg::ridge_solve(instance.design(), instance.targets(), sigma_sq * eta)
}

/// Ordinary least squares, `J^{-1} Z^T t`.
pub fn ml_estimate(instance: &RegressionInstance) -> Result<DVector<f64>> {
    map_estimate(instance, 1.0, 0.0)
}

/// `(1/N) |t - Z theta_ML|^2`.
pub fn ml_noise_estimate(instance: &RegressionInstance) -> Result<f64> {
    let theta = ml_estimate(instance)?;
    Ok((instance.targets() - instance.design() * theta).norm_squared() / instance.n() as f64)
}

/// The same estimator written as `(1/N) eps^T (I - Z J^{-1} Z^T) eps`.
pub fn ml_noise_projector_form(instance: &RegressionInstance) -> Result<f64> {
    let eps = instance.noise();
    let chol = ridge_cholesky(&gram(instance.design()), 0.0)?;
    let zte = instance.design().tr_mul(&eps);
    Ok((eps.norm_squared() - zte.dot(&chol.solve(&zte))) / instance.n() as f64)
}

/// `theta | sigma^2, D ~ N(J_s^{-1} Z^T t, (sigma^2 / beta) J_s^{-1})` with `s = sigma^2 eta`.
pub fn gibbs_conditional(instance: &RegressionInstance, sigma_sq: f64, eta: f64, beta: Beta) -> Result<GaussianLaw> {
    check_eta(eta)?;
    check_sigma(sigma_sq)?;
    let b = match beta {
        Beta::Finite(b) => b,
        Beta::Infinite => return Err(Error::Domain("the Gibbs conditional needs a finite beta".into())),
    };
    let chol = ridge_cholesky(&gram(instance.design()), sigma_sq * eta)?;
    let mean = chol.solve(&instance.design().tr_mul(instance.targets()));
    let mut cov = chol.inverse() * (sigma_sq / b);
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianLaw { mean, covariance: cov })
}

/// `Psi[v]`: one step of the noise-variance recursion evaluated on a precomputed eigen view.
pub fn psi(view: &SpectralView, v: f64, eta: f64, beta: Beta, prior: &NoisePrior) -> Result<f64> {
    check_sigma(v)?;
    let n = view.n as f64;
    let zeta = view.d() as f64 / n;
    beta.check_above(zeta)?;
    let s = v * eta;
    view.check_shift(s)?;
    let ratio = beta.ratio(zeta);
    let residual = ratio * view.rss(s) / n;
    let trace = if eta > 0.0 { v * v * eta * view.trace_inv(s) * beta.inv_gap(zeta) / n } else { 0.0 };
    let prior_term = 2.0 * v * v * ratio * prior.log_density_derivative(v) / n;
    Ok(residual - trace + prior_term)
}

/// `Psi[v | Z, theta0, eps]` for one instance.
pub fn sigma_recursion_step(
    v: f64,
    instance: &RegressionInstance,
    eta: f64,
    beta: Beta,
    prior: &NoisePrior,
) -> Result<f64> {
    check_eta(eta)?;
    psi(&SpectralView::of(instance)?, v, eta, beta, prior)
}

/// Ridge residual mean square `|t - Z theta(eta)|^2 / N`, the solver's starting point.
pub fn initial_sigma(view: &SpectralView, eta: f64) -> Result<f64> {
    view.check_shift(eta)?;
    let v0 = view.rss(eta) / view.n as f64;
    if !(v0 > 0.0) {
        return Err(Error::Domain("targets are interpolated exactly; residual variance is zero".into()));
    }
    Ok(v0)
}

fn damped_iteration(
    mut v: f64,
    map: impl Fn(f64) -> Result<f64>,
    opts: SolverOptions,
) -> Result<SigmaSolve> {
    let mut defect = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let target = map(v)?;
        if !target.is_finite() {
            return Err(Error::NoConvergence { iterations: it, last: v, defect });
        }
        let mut next = (1.0 - opts.damping) * v + opts.damping * target;
        if next <= 0.0 {
            next = 0.5 * v;
        }
        v = next;
        defect = (map(v)? - v).abs() / v;
        if defect <= opts.tol {
            return Ok(SigmaSolve { sigma_sq: v, iterations: it, residual: defect });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, last: v, defect })
}

/// Joint fixed point of the ridge estimate and the noise-variance equation at inverse
/// temperature `beta`.
pub fn solve_sigma(
    instance: &RegressionInstance,
    eta: f64,
    beta: Beta,
    prior: &NoisePrior,
    opts: SolverOptions,
) -> Result<SigmaSolve> {
    check_eta(eta)?;
    prior.validate()?;
    if let Some(s) = prior.pinned() {
        return Ok(SigmaSolve { sigma_sq: s, iterations: 0, residual: 0.0 });
    }
    beta.check_above(instance.zeta())?;
    let view = SpectralView::of(instance)?;
    solve_sigma_view(&view, eta, beta, prior, opts)
}

pub(crate) fn solve_sigma_view(
    view: &SpectralView,
    eta: f64,
    beta: Beta,
    prior: &NoisePrior,
    opts: SolverOptions,
) -> Result<SigmaSolve> {
    let v0 = initial_sigma(view, eta)?;
    damped_iteration(v0, |v| psi(view, v, eta, beta, prior), opts)
}

/// Posterior means `<theta>` and `<sigma^2>` at `beta = 1`, integrating the noise-variance
/// marginal by adaptive quadrature.
pub fn mmse_estimate(instance: &RegressionInstance, eta: f64, prior: &NoisePrior) -> Result<(DVector<f64>, f64)> {
    check_eta(eta)?;
    prior.validate()?;
    if let Some(s) = prior.pinned() {
        return Ok((map_estimate(instance, s, eta)?, s));
    }
    let view = SpectralView::of(instance)?;
    let marginal = SigmaMarginal::new(&view, eta, Beta::Finite(1.0), prior)?;
    let sigma_mean = marginal.expectation(|s| s);
    let d = view.d();
    let mut w = DVector::zeros(d);
    let weight = |s: f64| marginal.density(s);
    for k in 0..d {
        let (u, m) = (view.u[k], view.mu[k]);
        w[k] = integrate_on(|s| weight(s) * u / (m + s * eta), &marginal.partition);
    }
    Ok((&view.basis * w, sigma_mean))
}

/// Ensemble-averaged recursion map `<Psi[v]>` expressed through a spectral density of
/// `C = Z0^T Z0 / N` (scaled convention).
#[allow(clippy::too_many_arguments)]
pub fn deterministic_sigma_map(
    v: f64,
    zeta: f64,
    eta: f64,
    beta: Beta,
    sigma0_sq: f64,
    theta_prior_var: f64,
    rho: &SpectralDensity,
    prior: &NoisePrior,
    n: usize,
) -> Result<f64> {
    check_sigma(v)?;
    check_eta(eta)?;
    beta.check_above(zeta)?;
    let c = zeta * v * eta;
    let ratio = beta.ratio(zeta);
    let a2 = spectral_integral(rho, |l| if c == 0.0 { 0.0 } else { (c / (l + c)).powi(2) })?;
    let a2l = spectral_integral(rho, |l| if c == 0.0 { 0.0 } else { (c / (l + c)).powi(2) * l })?;
    let trace = if eta > 0.0 {
        v * v * eta * zeta * zeta * beta.inv_gap(zeta) * spectral_integral(rho, |l| 1.0 / (l + c))?
    } else {
        0.0
    };
    let prior_term = 2.0 * v * v * ratio * prior.log_density_derivative(v) / n as f64;
    Ok(ratio * sigma0_sq * (1.0 - zeta + zeta * a2) + ratio * theta_prior_var * a2l - trace + prior_term)
}

/// Fixed point of [`deterministic_sigma_map`], started from `v0`.
#[allow(clippy::too_many_arguments)]
pub fn deterministic_sigma_fixed_point(
    v0: f64,
    zeta: f64,
    eta: f64,
    beta: Beta,
    sigma0_sq: f64,
    theta_prior_var: f64,
    rho: &SpectralDensity,
    prior: &NoisePrior,
    n: usize,
    opts: SolverOptions,
) -> Result<SigmaSolve> {
    damped_iteration(
        v0,
        |v| deterministic_sigma_map(v, zeta, eta, beta, sigma0_sq, theta_prior_var, rho, prior, n),
        opts,
    )
}

/// Disorder variance of `Psi[v]` over `(Z, theta0, eps)`, split into the spectral-correlation
/// part and the explicit `1/N` part. Returns `(kernel, remainder)`.
#[allow(clippy::too_many_arguments)]
pub fn sigma_map_variance(
    v: f64,
    zeta: f64,
    eta: f64,
    beta: Beta,
    sigma0_sq: f64,
    theta_prior_var: f64,
    rho: &SpectralDensity,
    corr: &CorrelationKernel,
    n: usize,
) -> Result<(f64, f64)> {
    check_sigma(v)?;
    beta.check_above(zeta)?;
    let c = zeta * v * eta;
    let ratio = beta.ratio(zeta);
    let gap = beta.inv_gap(zeta);
    let (s2, s0) = (theta_prior_var, sigma0_sq);
    let a = |l: f64| if c == 0.0 { 0.0 } else { c / (l + c) };
    // Conditional mean of Psi given Z is the linear statistic of this function.
    let g = |l: f64| {
        let tr = if eta > 0.0 { v * v * eta * zeta * zeta * gap / (l + c) } else { 0.0 };
        ratio * a(l).powi(2) * (s0 * zeta + s2 * l) - tr
    };
    let kernel = corr.double_integral(g, g)?;
    let inner = spectral_integral(rho, |l| {
        let a4 = a(l).powi(4);
        s0 * s0 * (1.0 - zeta + zeta * a4) + s2 * s2 / zeta * a4 * l * l + 2.0 * s2 * s0 * a4 * l
    })?;
    Ok((kernel, 2.0 / n as f64 * ratio * ratio * inner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_instance, SeedSpec};
    use crate::model::PopulationModel;
    use proptest::prelude::*;

    fn inst(n: usize, d: usize, seed: u64, scaled: bool) -> RegressionInstance {
        let pop = PopulationModel::identity(d, 1.0, d as f64 / n as f64).unwrap();
        sample_instance(&pop, n, 1.0, scaled, SeedSpec::new(seed, 0)).unwrap()
    }

    #[test]
    fn hand_solved_two_by_two() {
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let t = DVector::from_vec(vec![1.0, 2.0]);
        let i = RegressionInstance::new(z, t, DVector::zeros(2), 1.0, false).unwrap();
        let th = map_estimate(&i, 1.0, 1.0).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-14 && (th[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn noiseless_interpolation_and_heavy_ridge() {
        let base = inst(30, 5, 1, false);
        let t = base.design() * base.theta0();
        let i = RegressionInstance::new(base.design().clone(), t, base.theta0().clone(), 1.0, false).unwrap();
        assert!((ml_estimate(&i).unwrap() - i.theta0()).amax() < 1e-10);
        assert!(ml_noise_estimate(&i).unwrap() < 1e-20);
        assert!(map_estimate(&i, 1.0, 1e12).unwrap().norm() < 1e-9);
        assert!(matches!(map_estimate(&i, 1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_least_squares() {
        let i = inst(25, 1, 4, false);
        let z = i.design().column(0);
        let expect = z.dot(i.targets()) / z.norm_squared();
        assert!((ml_estimate(&i).unwrap()[0] - expect).abs() < 1e-13);
        assert_eq!(ml_estimate(&i).unwrap(), map_estimate(&i, 3.7, 0.0).unwrap());
    }

    #[test]
    fn rank_deficient_is_an_error() {
        let z = crate::sampler::sample_design(4, 6, &DMatrix::identity(6, 6), false, SeedSpec::new(2, 0)).unwrap();
        let t = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let i = RegressionInstance::new(z, t, DVector::zeros(6), 1.0, false).unwrap();
        assert!(matches!(ml_estimate(&i), Err(Error::SingularSystem)));
        assert!(map_estimate(&i, 1.0, 0.5).is_ok());
    }

    #[test]
    fn projector_form_matches_residual() {
        let i = inst(60, 12, 7, false);
        let a = ml_noise_estimate(&i).unwrap();
        let b = ml_noise_projector_form(&i).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn gibbs_covariance_scaling() {
        let i = inst(40, 4, 3, false);
        let g1 = gibbs_conditional(&i, 0.7, 0.3, Beta::Finite(1.0)).unwrap();
        let g2 = gibbs_conditional(&i, 0.7, 0.3, Beta::Finite(2.0)).unwrap();
        assert!((&g1.covariance * 0.5 - &g2.covariance).amax() < 1e-15);
        assert_eq!(g1.mean, g2.mean);
        assert!((&g1.mean - map_estimate(&i, 0.7, 0.3).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn gibbs_orthonormal_design() {
        let n = 9;
        let mut z = DMatrix::<f64>::zeros(n, 3);
        for j in 0..3 {
            z[(j, j)] = (n as f64).sqrt();
        }
        let i = RegressionInstance::new(z, DVector::zeros(n), DVector::zeros(3), 1.0, false).unwrap();
        let g = gibbs_conditional(&i, 1.0, 0.0, Beta::Finite(1.0)).unwrap();
        assert!((g.covariance - DMatrix::identity(3, 3) / n as f64).amax() < 1e-15);
    }

    #[test]
    fn gibbs_samples_center_on_mean() {
        let i = inst(30, 3, 8, false);
        let g = gibbs_conditional(&i, 1.0, 0.5, Beta::Finite(1.0)).unwrap();
        let mut rng = SeedSpec::new(1, 1).rng(crate::sampler::Lane::Aux);
        let m = 100_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..m {
            acc += g.sample(&mut rng);
        }
        acc /= m as f64;
        for j in 0..3 {
            let se = (g.covariance[(j, j)] / m as f64).sqrt();
            assert!((acc[j] - g.mean[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn ml_sigma_fixed_point_is_exact() {
        let i = inst(80, 20, 5, true);
        let s = solve_sigma(&i, 0.0, Beta::Infinite, &NoisePrior::Flat, SolverOptions::default()).unwrap();
        let ml = ml_noise_estimate(&i).unwrap();
        assert!((s.sigma_sq - ml).abs() <= 1e-12 * ml);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn delta_prior_pins() {
        let i = inst(20, 4, 6, false);
        let s = solve_sigma(&i, 0.3, Beta::Finite(2.0), &NoisePrior::Delta { sigma_sq: 0.37 }, SolverOptions::default())
            .unwrap();
        assert_eq!(s.sigma_sq, 0.37);
        let (th, sg) = mmse_estimate(&i, 0.3, &NoisePrior::Delta { sigma_sq: 0.37 }).unwrap();
        assert_eq!(sg, 0.37);
        assert_eq!(th, map_estimate(&i, 0.37, 0.3).unwrap());
    }

    #[test]
    fn temperature_guard() {
        let i = inst(20, 10, 6, true);
        assert!(matches!(
            solve_sigma(&i, 0.0, Beta::Finite(0.4), &NoisePrior::Flat, SolverOptions::default()),
            Err(Error::TemperatureOutOfRange { .. })
        ));
    }

    #[test]
    fn recursion_fixed_point_equals_solver() {
        let i = inst(120, 30, 11, true);
        let prior = NoisePrior::InverseGamma { shape: 2.0, rate: 1.0 };
        let beta = Beta::Finite(1.5);
        let s = solve_sigma(&i, 0.8, beta, &prior, SolverOptions::default()).unwrap();
        let step = sigma_recursion_step(s.sigma_sq, &i, 0.8, beta, &prior).unwrap();
        assert!((step - s.sigma_sq).abs() < 1e-9 * s.sigma_sq);
        // Plain undamped iteration from far away reaches the same point.
        let mut v = 5.0;
        for _ in 0..400 {
            v = sigma_recursion_step(v, &i, 0.8, beta, &prior).unwrap();
        }
        assert!((v - s.sigma_sq).abs() < 1e-8 * s.sigma_sq);
    }

    #[test]
    fn eta_zero_recursion_is_constant() {
        let i = inst(50, 10, 12, true);
        let a = sigma_recursion_step(0.3, &i, 0.0, Beta::Finite(2.0), &NoisePrior::Flat).unwrap();
        let b = sigma_recursion_step(3.0, &i, 0.0, Beta::Finite(2.0), &NoisePrior::Flat).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mmse_sigma_near_beta_one_root() {
        // At eta = 0 with a flat prior the sigma^2 marginal is inverse gamma with shape
        // (N - d)/2 - 1 and scale RSS/2: its mode is the beta = 1 root RSS/(N - d) and its
        // mean is RSS/(N - d - 4).
        let i = inst(400, 100, 13, true);
        let (theta, s) = mmse_estimate(&i, 0.0, &NoisePrior::Flat).unwrap();
        let root = solve_sigma(&i, 0.0, Beta::Finite(1.0), &NoisePrior::Flat, SolverOptions::default()).unwrap();
        let rss = ml_noise_estimate(&i).unwrap() * 400.0;
        assert!((root.sigma_sq - rss / 300.0).abs() < 1e-9 * root.sigma_sq);
        assert!((s - rss / 296.0).abs() < 1e-6 * s, "{s} vs {}", rss / 296.0);
        assert!((theta - ml_estimate(&i).unwrap()).amax() < 1e-8);
    }

    #[test]
    fn recursion_remainder_matches_fixed_design_monte_carlo() {
        // Fixed Z, fresh (theta0, eps): Var(Psi[v] | Z) against the 1/N part on the design's
        // own spectrum.
        let (n, d, s2, eta, v) = (80, 40, 1.0, 0.8, 0.9);
        let zeta = d as f64 / n as f64;
        let beta = Beta::Finite(2.0);
        let base = inst(n, d, 3, true);
        let eigs = crate::spectra::covariance_eigenvalues(base.design(), true).unwrap();
        let rho = SpectralDensity::samples(eigs).unwrap();
        let zero = CorrelationKernel::zero(vec![0.0, 10.0]);
        let (k, rem) = sigma_map_variance(v, zeta, eta, beta, 1.0, s2, &rho, &zero, n).unwrap();
        assert_eq!(k, 0.0);
        let mut m = crate::stats::Moments::new();
        for r in 0..20_000u64 {
            let seed = SeedSpec::new(41, r);
            let th = crate::sampler::sample_theta0(d, s2, seed).unwrap();
            let t = crate::sampler::sample_targets(base.design(), &th, 1.0, seed).unwrap();
            let i = RegressionInstance::new(base.design().clone(), t, th, 1.0, true).unwrap();
            m.push(psi(&SpectralView::of(&i).unwrap(), v, eta, beta, &NoisePrior::Flat).unwrap());
        }
        let rel = (m.variance() - rem).abs() / rem;
        assert!(rel < 0.05, "{} vs {rem}", m.variance());
    }

    #[test]
    fn deterministic_map_limits() {
        let rho = SpectralDensity::marchenko_pastur(0.5).unwrap();
        let beta = Beta::Finite(2.0);
        for v in [0.1, 1.0, 7.0] {
            let m = deterministic_sigma_map(v, 0.5, 0.0, beta, 1.3, 1.0, &rho, &NoisePrior::Flat, 100).unwrap();
            assert!((m - 2.0 * 1.3 * 0.5 / 1.5).abs() < 1e-12);
        }
        // v -> infinity: the ratios tend to one. At infinite beta the map tends to
        // sigma0^2 + S^2 <lambda>; at finite beta the trace part grows like -v zeta / (beta - zeta).
        let (zeta, eta, s0, s2, v) = (0.5, 1.0, 1.3, 0.7, 1e8);
        let m = deterministic_sigma_map(v, zeta, eta, Beta::Infinite, s0, s2, &rho, &NoisePrior::Flat, 100).unwrap();
        assert!((m - (s0 + s2)).abs() < 1e-6, "{m}");
        let m = deterministic_sigma_map(v, zeta, eta, beta, s0, s2, &rho, &NoisePrior::Flat, 100).unwrap();
        let c = zeta * v * eta;
        let trace = v * v * eta * zeta * zeta / 1.5 * spectral_integral(&rho, |l| 1.0 / (l + c)).unwrap();
        let expect = 2.0 / 1.5 * (s0 + s2);
        assert!((m + trace - expect).abs() < 1e-6 * expect);
        assert!((trace / (v * zeta / 1.5) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn map_is_argmin(seed in 0u64..300, eta in 0.0f64..3.0, sigma_sq in 0.1f64..3.0) {
            let i = inst(25, 5, seed, false);
            let th = map_estimate(&i, sigma_sq, eta).unwrap();
            let energy = |x: &DVector<f64>| {
                (i.targets() - i.design() * x).norm_squared() / (2.0 * sigma_sq) + 0.5 * eta * x.norm_squared()
            };
            let e0 = energy(&th);
            let mut rng = SeedSpec::new(seed, 9).rng(crate::sampler::Lane::Aux);
            for _ in 0..20 {
                let dir = normal_vec(&mut rng, 5).normalize() * 1e-4;
                prop_assert!(energy(&(&th + dir)) > e0);
            }
        }

        #[test]
        fn noise_estimate_rotation_invariant(seed in 0u64..300) {
            let i = inst(30, 6, seed, false);
            let g = crate::sampler::sample_design(6, 6, &DMatrix::identity(6, 6), false, SeedSpec::new(seed, 5)).unwrap();
            let q = g.qr().q();
            let rotated = RegressionInstance::new(i.design() * &q, i.targets().clone(), q.transpose() * i.theta0(), 1.0, false).unwrap();
            let a = ml_noise_estimate(&i).unwrap();
            let b = ml_noise_estimate(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a);
        }

        #[test]
        fn ridge_norm_decreases_in_eta(seed in 0u64..300) {
            let i = inst(20, 6, seed, false);
            let norms: Vec<f64> = (0..10).map(|k| map_estimate(&i, 1.0, 0.25 * k as f64).unwrap().norm()).collect();
            for w in norms.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn delta_prior_ignores_data(seed in 0u64..100, s in 0.1f64..4.0) {
            let i = inst(15, 3, seed, false);
            let r = solve_sigma(&i, 0.5, Beta::Infinite, &NoisePrior::Delta { sigma_sq: s }, SolverOptions::default()).unwrap();
            prop_assert_eq!(r.sigma_sq, s);
        }
    }
}
