//! Closed-form sampling laws of the ML/MAP estimators, noise-estimator MGF/CF and tail
//! bounds, and MSE moments, characteristic function and deviation bounds.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimators::GaussianLaw;
use crate::linalg::ridge_cholesky;
use crate::model::RateFunctionEval;
use crate::quad::{golden_section_raw, integrate, QuadOptions};

/// Two-sided exponential bound on `|sigma_ml^2 - sigma0^2 (1 - zeta)| >= delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub delta: f64,
    /// `min(2, exp(-N lower_rate) + exp(-N upper_rate))`.
    pub bound: f64,
    pub lower_rate: f64,
    pub upper_rate: f64,
}

fn dof(n: usize, d: usize) -> Result<f64> {
    let nu = n as i64 + 1 - d as i64;
    if nu < 1 {
        return Err(Error::DegreesOfFreedom(nu));
    }
    Ok(nu as f64)
}

fn check_pos(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("{name} must be positive and finite, got {x}")));
    }
    Ok(())
}

fn check_zeta(zeta: f64) -> Result<()> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Domain(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    Ok(())
}

/// Shape factor `zeta sigma0^2 / (1 - zeta + 1/N)` of the ML estimator's t-law.
fn t_shape_factor(n: usize, zeta: f64, sigma0_sq: f64) -> f64 {
    zeta * sigma0_sq / (1.0 - zeta + 1.0 / n as f64)
}

/// Log-density of the multivariate Student-t law of the ML estimator (scaled design):
/// `N + 1 - d` degrees of freedom, location `theta0`, shape `zeta sigma0^2 Sigma^{-1} / (1 - zeta + 1/N)`.
pub fn student_t_logpdf(
    theta_hat: &DVector<f64>,
    theta0: &DVector<f64>,
    sigma_pop: &DMatrix<f64>,
    zeta: f64,
    sigma0_sq: f64,
    n: usize,
) -> Result<f64> {
    let d = theta0.len();
    if theta_hat.len() != d || sigma_pop.shape() != (d, d) {
        return Err(Error::Shape("theta_hat, theta0 and sigma_pop dimensions differ".into()));
    }
    check_pos("sigma0_sq", sigma0_sq)?;
    check_zeta(zeta)?;
    let nu = dof(n, d)?;
    let chol = nalgebra::Cholesky::new(sigma_pop.clone()).ok_or(Error::CovarianceNotPd)?;
    let s = t_shape_factor(n, zeta, sigma0_sq);
    let x = theta_hat - theta0;
    // Lambda^{-1} = Sigma / s, so x^T Lambda^{-1} x = x^T Sigma x / s.
    let maha = x.dot(&(sigma_pop * &x)) / s;
    let logdet_lambda = d as f64 * s.ln() - crate::linalg::chol_logdet(&chol);
    let df = d as f64;
    Ok(ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu) - 0.5 * df * (nu * std::f64::consts::PI).ln()
        - 0.5 * logdet_lambda
        - 0.5 * (nu + df) * (maha / nu).ln_1p())
}

/// Univariate marginal of the ML estimator's t-law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTMarginal {
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl StudentTMarginal {
    fn law(&self) -> StudentsT {
        StudentsT::new(self.location, self.scale, self.dof).expect("validated parameters")
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.law().cdf(x)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.law().ln_pdf(x)
    }

    /// `dof / (dof - 2) scale^2`; infinite for `dof <= 2`.
    pub fn variance(&self) -> f64 {
        if self.dof > 2.0 {
            self.dof / (self.dof - 2.0) * self.scale * self.scale
        } else {
            f64::INFINITY
        }
    }
}

/// Marginal law of coordinate `j` of the ML estimator.
pub fn student_t_marginal(
    j: usize,
    theta0: &DVector<f64>,
    sigma_pop: &DMatrix<f64>,
    zeta: f64,
    sigma0_sq: f64,
    n: usize,
) -> Result<StudentTMarginal> {
    let d = theta0.len();
    if sigma_pop.shape() != (d, d) || j >= d {
        return Err(Error::Shape(format!("coordinate {j} out of range for dimension {d}")));
    }
    check_pos("sigma0_sq", sigma0_sq)?;
    check_zeta(zeta)?;
    let nu = dof(n, d)?;
    let inv = nalgebra::Cholesky::new(sigma_pop.clone()).ok_or(Error::CovarianceNotPd)?.inverse();
    let scale = (t_shape_factor(n, zeta, sigma0_sq) * inv[(j, j)]).sqrt();
    Ok(StudentTMarginal { location: theta0[j], scale, dof: nu })
}

/// Law of the MAP estimator given the sample covariance `C = Z0^T Z0 / N`:
/// `N(C_c^{-1} C theta0, zeta sigma0^2 C_c^{-1} C C_c^{-1})` with `C_c = C + zeta sigma^2 eta I`.
pub fn map_conditional_gaussian(
    c_hat: &DMatrix<f64>,
    theta0: &DVector<f64>,
    zeta: f64,
    sigma_sq: f64,
    eta: f64,
    sigma0_sq: f64,
) -> Result<GaussianLaw> {
    let d = theta0.len();
    if c_hat.shape() != (d, d) {
        return Err(Error::Shape("sample covariance shape differs from theta0".into()));
    }
    check_pos("sigma_sq", sigma_sq)?;
    check_pos("sigma0_sq", sigma0_sq)?;
    check_zeta(zeta)?;
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be nonnegative, got {eta}")));
    }
    let chol = ridge_cholesky(c_hat, zeta * sigma_sq * eta)?;
    let mean = chol.solve(&(c_hat * theta0));
    let half = chol.solve(c_hat);
    let mut cov = chol.solve(&half.transpose()) * (zeta * sigma0_sq);
    cov = (&cov + cov.transpose()) * 0.5;
    GaussianLaw::new(mean, cov)
}

/// `log E exp(alpha RSS / 2) = -(N/2)(1 - zeta) log(1 - alpha sigma0^2)`.
pub fn noise_log_mgf(alpha: f64, n: usize, zeta: f64, sigma0_sq: f64) -> Result<f64> {
    check_pos("sigma0_sq", sigma0_sq)?;
    let x = alpha * sigma0_sq;
    if !(x < 1.0) {
        return Err(Error::MgfPole(x));
    }
    Ok(-0.5 * n as f64 * (1.0 - zeta) * (-x).ln_1p())
}

pub fn noise_mgf(alpha: f64, n: usize, zeta: f64, sigma0_sq: f64) -> Result<f64> {
    noise_log_mgf(alpha, n, zeta, sigma0_sq).map(f64::exp)
}

/// `E exp(i a RSS) = (1 - 2 i a sigma0^2)^{-N(1 - zeta)/2}`, the CF of `RSS ~ sigma0^2 chi^2_{N - d}`.
pub fn noise_cf(a: f64, n: usize, zeta: f64, sigma0_sq: f64) -> Complex64 {
    noise_cf_complex(Complex64::new(a, 0.0), n, zeta, sigma0_sq)
}

/// `noise_cf` continued to complex arguments; `noise_cf_complex(-i alpha / 2)` is the MGF.
pub fn noise_cf_complex(a: Complex64, n: usize, zeta: f64, sigma0_sq: f64) -> Complex64 {
    let base = Complex64::new(1.0, 0.0) - Complex64::i() * a * (2.0 * sigma0_sq);
    (base.ln() * (-0.5 * n as f64 * (1.0 - zeta))).exp()
}

/// Chernoff bound on the ML noise estimator with the optimal exponents.
pub fn noise_tail_bound(delta: f64, n: usize, zeta: f64, sigma0_sq: f64) -> Result<TailBound> {
    check_pos("sigma0_sq", sigma0_sq)?;
    check_zeta(zeta)?;
    let m = 1.0 - zeta;
    let hi = sigma0_sq * m;
    if !(delta > 0.0 && delta < hi) {
        return Err(Error::DeltaOutOfRange { delta, lo: 0.0, hi });
    }
    let x = delta / sigma0_sq;
    let lower_rate = 0.5 * (m * (m / (m - x)).ln() - x);
    let upper_rate = 0.5 * (m * (m / (m + x)).ln() + x);
    let nf = n as f64;
    let bound = ((-nf * lower_rate).exp() + (-nf * upper_rate).exp()).min(2.0);
    Ok(TailBound { delta, bound, lower_rate, upper_rate })
}

fn ln_gamma_density(nu: f64, omega: f64) -> f64 {
    let h = 0.5 * nu;
    h * h.ln() - ln_gamma(h) + (h - 1.0) * omega.ln() - h * omega
}

/// `Gamma_nu(omega)`: the gamma law with shape `nu/2` and unit mean.
pub fn gamma_density(nu: f64, omega: f64) -> Result<f64> {
    check_pos("nu", nu)?;
    check_pos("omega", omega)?;
    Ok(ln_gamma_density(nu, omega).exp())
}

fn spectrum_traces(d: usize, sigma_pop_eigs: &[f64]) -> Result<(f64, f64)> {
    if sigma_pop_eigs.len() != d {
        return Err(Error::Shape(format!("{} eigenvalues for dimension {d}", sigma_pop_eigs.len())));
    }
    if let Some(&l) = sigma_pop_eigs.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::Domain(format!("population eigenvalue {l} is not positive")));
    }
    let t1 = sigma_pop_eigs.iter().map(|l| 1.0 / l).sum::<f64>();
    let t2 = sigma_pop_eigs.iter().map(|l| 1.0 / (l * l)).sum::<f64>();
    Ok((t1, t2))
}

fn mse_prelude(n: usize, d: usize, sigma0_sq: f64, eigs: &[f64]) -> Result<(f64, f64, f64)> {
    check_pos("sigma0_sq", sigma0_sq)?;
    if n <= d + 1 {
        return Err(Error::DegreesOfFreedom(n as i64 + 1 - d as i64));
    }
    let (t1, t2) = spectrum_traces(d, eigs)?;
    Ok((d as f64 / n as f64, t1, t2))
}

/// Mean and large-`(N, d)` variance of `MSE = |theta_ml - theta0|^2 / d`.
pub fn mse_mean_var(n: usize, d: usize, sigma0_sq: f64, sigma_pop_eigs: &[f64]) -> Result<(f64, f64)> {
    let (zeta, t1, t2) = mse_prelude(n, d, sigma0_sq, sigma_pop_eigs)?;
    let df = d as f64;
    let mean = zeta * sigma0_sq / (1.0 - zeta - 1.0 / n as f64) * t1 / df;
    let var = 2.0 * (zeta * sigma0_sq / (1.0 - zeta)).powi(2) * t2 / (df * df);
    Ok((mean, var))
}

/// Exact second moment of the MSE from the t-law (needs `N > d + 3`).
pub fn mse_second_moment_exact(n: usize, d: usize, sigma0_sq: f64, sigma_pop_eigs: &[f64]) -> Result<f64> {
    let (zeta, t1, t2) = mse_prelude(n, d, sigma0_sq, sigma_pop_eigs)?;
    if n <= d + 3 {
        return Err(Error::DegreesOfFreedom(n as i64 + 1 - d as i64));
    }
    let inv_n = 1.0 / n as f64;
    let df = d as f64;
    let pref = (zeta * sigma0_sq).powi(2) / ((1.0 - zeta - inv_n) * (1.0 - zeta - 3.0 * inv_n));
    Ok(pref * ((t1 / df).powi(2) + 2.0 * t2 / (df * df)))
}

/// Exact finite-`N` variance of the MSE: exact second moment minus the squared mean.
pub fn mse_variance_exact(n: usize, d: usize, sigma0_sq: f64, sigma_pop_eigs: &[f64]) -> Result<f64> {
    let m2 = mse_second_moment_exact(n, d, sigma0_sq, sigma_pop_eigs)?;
    let (mean, _) = mse_mean_var(n, d, sigma0_sq, sigma_pop_eigs)?;
    Ok(m2 - mean * mean)
}

/// `E exp(i a |theta_ml - theta0|^2)` as an integral over the gamma mixing variable.
pub fn mse_cf(a: f64, n: usize, d: usize, sigma0_sq: f64, sigma_pop_eigs: &[f64]) -> Result<Complex64> {
    check_pos("sigma0_sq", sigma0_sq)?;
    let nu = dof(n, d)?;
    spectrum_traces(d, sigma_pop_eigs)?;
    if a == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let zeta = d as f64 / n as f64;
    let s = t_shape_factor(n, zeta, sigma0_sq);
    let gamma = Gamma::new(0.5 * nu, 0.5 * nu).map_err(|e| Error::Domain(e.to_string()))?;
    let lo = gamma.inverse_cdf(1e-12);
    let hi = gamma.inverse_cdf(1.0 - 1e-12);
    let integrand = |w: f64| {
        let log_prod: Complex64 = sigma_pop_eigs
            .iter()
            .map(|l| Complex64::new(1.0, -2.0 * a * s / (w * l)).ln())
            .sum();
        (log_prod * -0.5 + ln_gamma_density(nu, w)).exp()
    };
    integrate(integrand, lo, hi, QuadOptions::rel(1e-10)).map(|q| q.value)
}

/// Admissible `alpha` range of the minus branch: `alpha mu < (1 - sqrt zeta)^2 / (1 - zeta)`.
pub fn minus_alpha_range(mu: f64, zeta: f64) -> (f64, f64) {
    (0.0, (1.0 - zeta.sqrt()).powi(2) / ((1.0 - zeta) * mu))
}

fn phi_minus(w: f64, alpha: f64, zeta: f64) -> f64 {
    (1.0 - zeta) * (w.ln() - w) + zeta * (w / (w - alpha)).ln()
}

fn phi_plus(w: f64, alpha: f64, zeta: f64) -> f64 {
    (1.0 - zeta) * (w.ln() - w) + zeta * (w / (w + alpha)).ln()
}

fn omega_minus(a: f64, zeta: f64) -> f64 {
    let h = 0.5 * (1.0 + a);
    h + (h * h - a / (1.0 - zeta)).max(0.0).sqrt()
}

fn omega_plus(a: f64, zeta: f64) -> f64 {
    0.5 * (1.0 - a + ((a - 1.0).powi(2) + 4.0 * a / (1.0 - zeta)).sqrt())
}

/// Minus-branch (upper tail) rate at `delta = 0`:
/// `Phi_-(delta) = rate + alpha zeta delta / 2`.
pub fn mse_rate_minus(alpha: f64, mu: f64, zeta: f64) -> Result<RateFunctionEval> {
    check_pos("mu", mu)?;
    check_zeta(zeta)?;
    let range = minus_alpha_range(mu, zeta);
    if !(alpha > range.0 && alpha < range.1) {
        return Err(Error::AlphaOutOfRange { alpha, lo: range.0, hi: range.1 });
    }
    let saddle = omega_minus(alpha * mu, zeta);
    if !(saddle > alpha) {
        return Err(Error::AlphaOutOfRange { alpha, lo: range.0, hi: saddle.min(range.1) });
    }
    let rate = 0.5 * (zeta - 1.0 - phi_minus(saddle, alpha, zeta) + alpha * zeta * mu);
    Ok(RateFunctionEval { alpha, saddle, rate, valid_alpha_range: range })
}

/// Plus-branch (lower tail) rate at `delta = 0`:
/// `Phi_+(delta) = rate + alpha zeta delta / 2`.
pub fn mse_rate_plus(alpha: f64, mu: f64, zeta: f64) -> Result<RateFunctionEval> {
    check_pos("mu", mu)?;
    check_zeta(zeta)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::AlphaOutOfRange { alpha, lo: 0.0, hi: f64::INFINITY });
    }
    let a = alpha * mu;
    let saddle = omega_plus(a, zeta);
    let rate = 0.5 * (zeta - 1.0 - phi_plus(saddle, a, zeta) - alpha * zeta * mu);
    Ok(RateFunctionEval { alpha, saddle, rate, valid_alpha_range: (0.0, f64::INFINITY) })
}

/// Both branches at the same `alpha` and `mu`: `(minus, plus)`.
pub fn mse_rate_functions(alpha: f64, mu: f64, zeta: f64) -> Result<(RateFunctionEval, RateFunctionEval)> {
    Ok((mse_rate_minus(alpha, mu, zeta)?, mse_rate_plus(alpha, mu, zeta)?))
}

/// `mu(lambda) = zeta sigma0^2 / ((1 - zeta) lambda)`.
pub fn mse_mu(lambda: f64, zeta: f64, sigma0_sq: f64) -> f64 {
    zeta * sigma0_sq / ((1.0 - zeta) * lambda)
}

/// Exponent-order bound on `P(|MSE - mu| >= delta)` with both prefactors set to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseDeviationBound {
    pub delta: f64,
    pub bound: f64,
    pub minus: RateFunctionEval,
    pub plus: RateFunctionEval,
    /// `Phi_-` and `Phi_+` at `delta`.
    pub minus_exponent: f64,
    pub plus_exponent: f64,
    /// Whether `mu(lambda_max) >= 1` or `delta > 1 - mu(lambda_max)`.
    pub minus_condition: bool,
}

impl MseDeviationBound {
    /// `-log(bound) / N`.
    pub fn exponent_per_sample(&self, n: usize) -> f64 {
        -self.bound.ln() / n as f64
    }
}

/// Deviation bound for the ML MSE. With `alpha = None` each branch's exponent is maximized
/// over its admissible range by golden section (tol 1e-8).
pub fn mse_deviation_bound(
    delta: f64,
    alpha: Option<f64>,
    n: usize,
    d: usize,
    sigma0_sq: f64,
    lambda_min: f64,
    lambda_max: f64,
) -> Result<MseDeviationBound> {
    check_pos("sigma0_sq", sigma0_sq)?;
    check_pos("lambda_min", lambda_min)?;
    if !(lambda_max >= lambda_min && lambda_max.is_finite()) {
        return Err(Error::Domain(format!("lambda_max {lambda_max} below lambda_min {lambda_min}")));
    }
    let zeta = d as f64 / n as f64;
    check_zeta(zeta)?;
    let mu_minus = mse_mu(lambda_max, zeta, sigma0_sq);
    let mu_plus = mse_mu(lambda_min, zeta, sigma0_sq);
    if !(delta > 0.0 && delta < mu_plus) {
        return Err(Error::DeltaOutOfRange { delta, lo: 0.0, hi: mu_plus });
    }
    let lin = |alpha: f64| 0.5 * alpha * zeta * delta;
    let (minus, plus) = match alpha {
        Some(a) => (mse_rate_minus(a, mu_minus, zeta)?, mse_rate_plus(a, mu_plus, zeta)?),
        None => {
            let (_, hi) = minus_alpha_range(mu_minus, zeta);
            let eps = 1e-9 * hi;
            let neg = |a: f64| mse_rate_minus(a, mu_minus, zeta).map(|r| -(r.rate + lin(a))).unwrap_or(f64::INFINITY);
            let (a_m, _) = golden_section_raw(&neg, eps, hi - eps, 1e-8);
            let cap = 50.0 / mu_plus;
            let neg = |a: f64| mse_rate_plus(a, mu_plus, zeta).map(|r| -(r.rate + lin(a))).unwrap_or(f64::INFINITY);
            let (a_p, _) = golden_section_raw(&neg, 1e-12 * cap, cap, 1e-8);
            (mse_rate_minus(a_m, mu_minus, zeta)?, mse_rate_plus(a_p, mu_plus, zeta)?)
        }
    };
    let minus_exponent = minus.rate + lin(minus.alpha);
    let plus_exponent = plus.rate + lin(plus.alpha);
    let nf = n as f64;
    let bound = (-nf * minus_exponent).exp() + (-nf * plus_exponent).exp();
    Ok(MseDeviationBound {
        delta,
        bound,
        minus,
        plus,
        minus_exponent,
        plus_exponent,
        minus_condition: mu_minus >= 1.0 || delta > 1.0 - mu_minus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::map_estimate;
    use crate::model::RegressionInstance;
    use crate::quad::integrate;
    use crate::sampler::{normal_vec, sample_design, SeedSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Scalar t log-density with location `m`, scale `s`, `nu` degrees of freedom, written out directly.
    fn scalar_t(x: f64, m: f64, s: f64, nu: f64) -> f64 {
        let z = (x - m) / s;
        ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln() - s.ln()
            - (nu + 1.0) / 2.0 * (1.0 + z * z / nu).ln()
    }

    #[test]
    fn student_t_scalar_oracle() {
        let n = 30;
        let zeta: f64 = 1.0 / 30.0;
        let sig = DMatrix::from_element(1, 1, 1.0);
        let th0 = DVector::from_element(1, 0.4);
        let s = (zeta * 0.7 / (1.0 - zeta + 1.0 / 30.0)).sqrt();
        for x in [-1.0, 0.0, 0.35, 0.4, 2.0] {
            let got = student_t_logpdf(&DVector::from_element(1, x), &th0, &sig, zeta, 0.7, n).unwrap();
            assert_relative_eq!(got, scalar_t(x, 0.4, s, n as f64), epsilon = 1e-10);
        }
        let marg = student_t_marginal(0, &th0, &sig, zeta, 0.7, n).unwrap();
        assert_relative_eq!(marg.ln_pdf(1.1), scalar_t(1.1, 0.4, s, 30.0), epsilon = 1e-10);
    }

    #[test]
    fn student_t_mode_is_theta0() {
        let d = 5;
        let sig = DMatrix::from_fn(d, d, |i, j| if i == j { 1.5 } else { 0.2 });
        let th0 = DVector::from_fn(d, |i, _| i as f64 * 0.3);
        let top = student_t_logpdf(&th0, &th0, &sig, 0.25, 1.0, 20).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = normal_vec(&mut rng, d).normalize();
            let off = student_t_logpdf(&(&th0 + u * 0.1), &th0, &sig, 0.25, 1.0, 20).unwrap();
            assert!(off < top);
        }
    }

    #[test]
    fn student_t_normalizes() {
        let sig1 = DMatrix::from_element(1, 1, 2.0);
        let th1 = DVector::from_element(1, 0.0);
        let f = |x: f64| student_t_logpdf(&DVector::from_element(1, x), &th1, &sig1, 0.1, 1.0, 10).unwrap().exp();
        let total = integrate(f, -60.0, 60.0, QuadOptions::rel(1e-10)).unwrap().value;
        assert!((total - 1.0).abs() < 1e-6, "{total}");

        let sig2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let th2 = DVector::from_vec(vec![0.5, -0.5]);
        let inner = |y: f64| {
            integrate(
                |x: f64| {
                    let p = DVector::from_vec(vec![x, y]);
                    student_t_logpdf(&p, &th2, &sig2, 0.2, 1.0, 10).unwrap().exp()
                },
                -30.0,
                30.0,
                QuadOptions::rel(1e-9),
            )
            .unwrap()
            .value
        };
        let total = integrate(inner, -30.0, 30.0, QuadOptions::rel(1e-8)).unwrap().value;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn student_t_dof_error() {
        let sig = DMatrix::identity(5, 5);
        let th = DVector::zeros(5);
        assert!(matches!(student_t_logpdf(&th, &th, &sig, 0.9, 1.0, 3), Err(Error::DegreesOfFreedom(-1))));
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let z = sample_design(3 * d, d, &DMatrix::identity(d, d), false, SeedSpec::new(seed, 0)).unwrap();
        z.tr_mul(&z) / (3 * d) as f64
    }

    #[test]
    fn map_conditional_at_zero_ridge() {
        let c = random_spd(6, 11);
        let th0 = DVector::from_fn(6, |i, _| (i as f64).cos());
        let law = map_conditional_gaussian(&c, &th0, 0.3, 0.9, 0.0, 1.2).unwrap();
        assert!((&law.mean - &th0).amax() < 1e-10);
        let expect = c.clone().try_inverse().unwrap() * (0.3 * 1.2);
        assert!((&law.covariance - expect).amax() < 1e-10);
    }

    #[test]
    fn map_conditional_limits() {
        let c = random_spd(4, 5);
        let th0 = DVector::from_element(4, 1.0);
        let law = map_conditional_gaussian(&c, &th0, 0.5, 1.0, 1e9, 1.0).unwrap();
        assert!(law.mean.amax() < 1e-8);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let th = DVector::from_element(2, 1.0);
        assert!(matches!(map_conditional_gaussian(&sing, &th, 0.5, 1.0, 0.0, 1.0), Err(Error::SingularSystem)));
        assert!(map_conditional_gaussian(&sing, &th, 0.5, 1.0, 0.5, 1.0).is_ok());
    }

    #[test]
    fn map_conditional_matches_fixed_design_draws() {
        // With Z fixed the MAP estimator is an affine image of the noise.
        let (n, d) = (40, 4);
        let z0 = sample_design(n, d, &DMatrix::identity(d, d), false, SeedSpec::new(8, 0)).unwrap();
        let z = &z0 / (d as f64).sqrt();
        let th0 = DVector::from_vec(vec![0.5, -0.2, 1.0, 0.0]);
        let (sigma_sq, eta, s0) = (0.8, 0.6, 1.0);
        let c = z0.tr_mul(&z0) / n as f64;
        let zeta = d as f64 / n as f64;
        let law = map_conditional_gaussian(&c, &th0, zeta, sigma_sq, eta, s0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let clean = &z * &th0;
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let t = &clean + normal_vec(&mut rng, n) * s0.sqrt();
                let inst = RegressionInstance::new(z.clone(), t, th0.clone(), s0, true).unwrap();
                map_estimate(&inst, sigma_sq, eta).unwrap()[1]
            })
            .collect();
        let (m, v) = law.marginal(1);
        let normal = statrs::distribution::Normal::new(m, v.sqrt()).unwrap();
        let ks = crate::stats::ks_statistic(&draws, |x| normal.cdf(x));
        assert!(crate::stats::ks_p_value(ks, draws.len()) > 0.01, "ks {ks}");
    }

    #[test]
    fn noise_mgf_values() {
        assert_eq!(noise_mgf(0.0, 40, 0.5, 1.0).unwrap(), 1.0);
        assert_relative_eq!(noise_log_mgf(0.1, 40, 0.5, 1.0).unwrap(), -10.0 * 0.9f64.ln(), epsilon = 1e-14);
        assert!(matches!(noise_mgf(1.0, 40, 0.5, 1.0), Err(Error::MgfPole(_))));
        assert!(matches!(noise_mgf(0.6, 40, 0.5, 2.0), Err(Error::MgfPole(_))));
    }

    #[test]
    fn noise_cf_values() {
        assert_eq!(noise_cf(0.0, 40, 0.5, 1.0), Complex64::new(1.0, 0.0));
        for a in [0.05, 0.3, 1.7] {
            let p = noise_cf(a, 40, 0.5, 1.3);
            let m = noise_cf(-a, 40, 0.5, 1.3);
            assert!((p.conj() - m).norm() < 1e-14);
            // Gamma(k, theta) CF modulus: (1 + (a theta)^2)^{-k/2}.
            let (k, theta) = (40.0 * 0.5 / 2.0, 2.0 * 1.3);
            let modulus_sq = (1.0 + (a * theta).powi(2)).powf(-k);
            assert!((p.norm_sqr() - modulus_sq).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mgf_is_cf_continuation(alpha in -3.0f64..0.95, n in 5usize..200, zeta in 0.05f64..0.95, s0 in 0.2f64..1.0) {
            let mgf = noise_mgf(alpha, n, zeta, s0).unwrap();
            let cf = noise_cf_complex(Complex64::new(0.0, -alpha / 2.0), n, zeta, s0);
            prop_assert!((cf.re - mgf).abs() <= 1e-12 * mgf.max(1.0));
            prop_assert!(cf.im.abs() <= 1e-12 * mgf.max(1.0));
        }

        #[test]
        fn tail_rates_nonnegative(frac in 0.001f64..0.999, zeta in 0.05f64..0.95, s0 in 0.1f64..3.0) {
            let delta = frac * s0 * (1.0 - zeta);
            let b = noise_tail_bound(delta, 100, zeta, s0).unwrap();
            prop_assert!(b.lower_rate >= 0.0 && b.upper_rate >= 0.0);
            prop_assert!(b.bound > 0.0 && b.bound <= 2.0);
        }
    }

    #[test]
    fn tail_bound_reference() {
        let b = noise_tail_bound(0.2, 100, 0.5, 1.0).unwrap();
        let lo = 0.5 * (0.5 * (0.5f64 / 0.3).ln() - 0.2);
        let up = 0.5 * (0.5 * (0.5f64 / 0.7).ln() + 0.2);
        assert_relative_eq!(b.bound, (-100.0 * lo).exp() + (-100.0 * up).exp(), epsilon = 1e-14);
        assert!((b.bound - 0.267).abs() < 2e-3);
        let tiny = noise_tail_bound(1e-9, 100, 0.5, 1.0).unwrap();
        assert!(tiny.lower_rate < 1e-15 && tiny.upper_rate < 1e-15);
        assert!((tiny.bound - 2.0).abs() < 1e-12);
        assert!(matches!(noise_tail_bound(0.5, 100, 0.5, 1.0), Err(Error::DeltaOutOfRange { .. })));
        assert!(noise_tail_bound(0.0, 100, 0.5, 1.0).is_err());
    }

    #[test]
    fn tail_rates_increase_with_delta() {
        let mut prev = (0.0, 0.0);
        for k in 1..100 {
            let b = noise_tail_bound(0.005 * k as f64, 50, 0.5, 1.0).unwrap();
            assert!(b.lower_rate > prev.0 && b.upper_rate > prev.1);
            prev = (b.lower_rate, b.upper_rate);
        }
    }

    #[test]
    fn gamma_density_checks() {
        for w in [0.1, 1.0, 3.7] {
            assert_relative_eq!(gamma_density(2.0, w).unwrap(), (-w).exp(), epsilon = 1e-14);
        }
        for nu in [1.0, 5.0, 50.0] {
            // w = u^2 removes the w^{-1/2} endpoint singularity at nu = 1.
            let f = |u: f64| 2.0 * u * gamma_density(nu, u * u).unwrap();
            let total = integrate(f, 0.0, 1.0, QuadOptions::rel(1e-13)).unwrap().value
                + integrate(f, 1.0, 12.0, QuadOptions::rel(1e-13)).unwrap().value;
            assert!((total - 1.0).abs() < 1e-8, "nu {nu}: {total}");
        }
        let mean = integrate(|w: f64| w * gamma_density(10.0, w).unwrap(), 1e-12, 20.0, QuadOptions::rel(1e-12))
            .unwrap()
            .value;
        assert!((mean - 1.0).abs() < 1e-8);
        assert!(gamma_density(0.0, 1.0).is_err() && gamma_density(1.0, 0.0).is_err());
    }

    #[test]
    fn mse_mean_var_reference() {
        let eigs = vec![1.0; 100];
        let (mean, var) = mse_mean_var(200, 100, 1.0, &eigs).unwrap();
        assert_relative_eq!(mean, 0.5 / 0.495, epsilon = 1e-14);
        assert_relative_eq!(var, 2.0 * 0.25 / 0.25 / 100.0, epsilon = 1e-14);
        assert!(matches!(mse_mean_var(11, 10, 1.0, &[1.0; 10]), Err(Error::DegreesOfFreedom(_))));
    }

    #[test]
    fn mse_variance_self_averages() {
        let mut prev = f64::INFINITY;
        for d in [10, 100, 1000, 10_000] {
            let eigs: Vec<f64> = (0..d).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
            let (_, var) = mse_mean_var(2 * d, d, 1.0, &eigs).unwrap();
            assert!(var < prev);
            prev = var;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn exact_second_moment_approaches_variance_formula() {
        let (n, d) = (10_000, 5_000);
        let eigs = vec![1.0; d];
        let (_, var) = mse_mean_var(n, d, 1.0, &eigs).unwrap();
        let exact = mse_variance_exact(n, d, 1.0, &eigs).unwrap();
        assert!((exact - var).abs() < 1e-3, "{exact} vs {var}");
        // The closed-form variance is short by 1/(1 - zeta) at leading order.
        assert!((exact / var - 2.0).abs() < 0.01, "{}", exact / var);
    }

    #[test]
    fn mse_cf_basic() {
        let eigs = vec![1.0, 0.5, 2.0, 1.0, 1.5, 0.8, 1.0, 1.2, 0.9, 1.1];
        assert_eq!(mse_cf(0.0, 50, 10, 1.0, &eigs).unwrap(), Complex64::new(1.0, 0.0));
        for (n, d) in [(50, 10), (12, 10), (400, 200)] {
            let e = vec![1.0; d];
            assert!((mse_cf(1e-14, n, d, 1.0, &e).unwrap() - 1.0).norm() < 1e-10);
        }
        for a in [0.1, 0.3, 1.0] {
            let p = mse_cf(a, 50, 10, 1.0, &eigs).unwrap();
            let m = mse_cf(-a, 50, 10, 1.0, &eigs).unwrap();
            assert!((p.conj() - m).norm() < 1e-10);
            assert!(p.norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn mse_cf_derivative_is_mean() {
        let eigs = vec![1.0, 0.5, 2.0, 1.0, 1.5, 0.8, 1.0, 1.2, 0.9, 1.1];
        let h = 1e-5;
        let p = mse_cf(h, 50, 10, 1.0, &eigs).unwrap();
        let m = mse_cf(-h, 50, 10, 1.0, &eigs).unwrap();
        let deriv = (p - m) / (2.0 * h);
        let (mean, _) = mse_mean_var(50, 10, 1.0, &eigs).unwrap();
        let expect = 10.0 * mean;
        assert!((deriv.im - expect).abs() < 1e-3 * expect, "{deriv} vs {expect}");
        assert!(deriv.re.abs() < 1e-3 * expect);
    }

    #[test]
    fn rate_saddles_at_small_alpha() {
        let (m, p) = mse_rate_functions(1e-10, 1.3, 0.4).unwrap();
        assert!((m.saddle - 1.0).abs() < 1e-8 && (p.saddle - 1.0).abs() < 1e-8);
        assert!(m.rate.abs() < 1e-9 && p.rate.abs() < 1e-9);
    }

    #[test]
    fn minus_branch_taylor() {
        let alpha = 1e-4;
        for (mu, zeta, delta) in [(1.0, 0.5, 0.1), (1.4, 0.3, 0.05), (0.7, 0.6, 0.5)] {
            let r = mse_rate_minus(alpha, mu, zeta).unwrap();
            let bracket_over_zeta = 2.0 * (r.rate + 0.5 * alpha * zeta * delta) / zeta;
            assert!((bracket_over_zeta - (mu - 1.0 + delta) * alpha).abs() < 1e-6);
        }
    }

    #[test]
    fn plus_branch_taylor() {
        let alpha = 1e-4;
        for (mu, zeta, delta) in [(1.0, 0.5, 0.25), (2.0, 0.3, 0.5), (0.6, 0.7, 0.1)] {
            let r = mse_rate_plus(alpha, mu, zeta).unwrap();
            let bracket = 2.0 * (r.rate + 0.5 * alpha * zeta * delta);
            let lead = delta * zeta * alpha;
            let series = lead - mu * mu * zeta * alpha * alpha / (2.0 * (1.0 - zeta));
            assert!((bracket - series).abs() < 1e-6 * lead, "{bracket} vs {series}");
        }
    }

    #[test]
    fn minus_branch_range() {
        let (lo, hi) = minus_alpha_range(1.0, 0.5);
        assert_eq!(lo, 0.0);
        assert!(mse_rate_minus(0.5 * hi, 1.0, 0.5).is_ok());
        assert!(matches!(mse_rate_minus(1.01 * hi, 1.0, 0.5), Err(Error::AlphaOutOfRange { .. })));
        assert!(mse_rate_plus(1e3, 1.0, 0.5).is_ok());
        assert!(mse_rate_plus(0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn deviation_bound_positivity() {
        // Sigma = I, sigma0^2 = 1, zeta = 0.5 gives mu = 1.
        let b = mse_deviation_bound(1e-3, None, 400, 200, 1.0, 1.0, 1.0).unwrap();
        assert!(b.minus_condition && b.minus_exponent > 0.0 && b.plus_exponent > 0.0);
        let mu1 = mse_mu(1.0, 0.5, 1.0);
        for k in 1..20 {
            let delta = mu1 * k as f64 / 20.0;
            let b = mse_deviation_bound(delta, None, 100, 50, 1.0, 1.0, 1.0).unwrap();
            assert!(b.plus_exponent > 0.0, "delta {delta}");
        }
        // mu < 1 needs delta > 1 - mu for the minus branch.
        let low = mse_deviation_bound(0.05, None, 100, 50, 1.0, 2.0, 2.0).unwrap();
        assert!(!low.minus_condition);
        assert!(mse_deviation_bound(0.0, None, 100, 50, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn deviation_bound_optimum_dominates_fixed_alpha() {
        let opt = mse_deviation_bound(0.25, None, 100, 50, 1.0, 1.0, 1.0).unwrap();
        for a in [0.01, 0.05, 0.1] {
            let fixed = mse_deviation_bound(0.25, Some(a), 100, 50, 1.0, 1.0, 1.0).unwrap();
            assert!(opt.minus_exponent >= fixed.minus_exponent - 1e-10);
            assert!(opt.plus_exponent >= fixed.plus_exponent - 1e-10);
        }
    }
}
