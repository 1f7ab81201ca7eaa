//! Conditional and full free energies, their Helmholtz decomposition, and the exact and
//! asymptotic formulas for free-energy averages and fluctuations.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::initial_sigma;
use crate::linalg::{chol_logdet, gram, ridge_cholesky, SpectralView};
use crate::model::{Beta, FeValue, FreeEnergyBreakdown, NoisePrior, RegressionInstance, SpectralDensity};
use crate::quad::{golden_section, golden_section_raw, integrate, integrate_on, QuadOptions};
use crate::spectra::{spectral_integral, support_min, CorrelationKernel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyCurvePoint {
    pub temperature: f64,
    pub zeta: f64,
    pub value: FeValue,
}

fn finite_beta(beta: Beta) -> Result<f64> {
    match beta {
        Beta::Finite(b) => Ok(b),
        Beta::Infinite => Err(Error::Domain("this quantity needs a finite beta".into())),
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("{name} must be positive, got {x}")));
    }
    Ok(())
}

/// `F_{beta, sigma^2}[D]` and its split into average energy and entropy.
pub fn conditional_free_energy(
    instance: &RegressionInstance,
    sigma_sq: f64,
    eta: f64,
    beta: Beta,
) -> Result<FreeEnergyBreakdown> {
    let b = finite_beta(beta)?;
    check_positive("sigma^2", sigma_sq)?;
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be nonnegative, got {eta}")));
    }
    let (z, t) = (instance.design(), instance.targets());
    let d = instance.d() as f64;
    let chol = ridge_cholesky(&gram(z), sigma_sq * eta)?;
    let zt = z.tr_mul(t);
    let theta = chol.solve(&zt);
    let quad = t.norm_squared() - zt.dot(&theta);
    let log_vol = d * (2.0 * PI * E * sigma_sq / b).ln() - chol_logdet(&chol);
    let free_energy = d / (2.0 * b) + quad / (2.0 * sigma_sq) - log_vol / (2.0 * b);
    let min_energy = (t - z * &theta).norm_squared() / (2.0 * sigma_sq) + 0.5 * eta * theta.norm_squared();
    Ok(FreeEnergyBreakdown {
        free_energy,
        avg_energy: d / (2.0 * b) + min_energy,
        entropy: 0.5 * log_vol,
        temperature: 1.0 / b,
    })
}

/// Conditional free energy on an eigen view, `O(d)` per call.
pub fn conditional_free_energy_view(view: &SpectralView, sigma_sq: f64, eta: f64, beta: f64) -> FreeEnergyBreakdown {
    let d = view.d() as f64;
    let s = sigma_sq * eta;
    let log_vol = d * (2.0 * PI * E * sigma_sq / beta).ln() - view.logdet(s);
    let quad = view.quad_form(s);
    let avg_energy = d / (2.0 * beta) + quad / (2.0 * sigma_sq);
    FreeEnergyBreakdown {
        free_energy: avg_energy - log_vol / (2.0 * beta),
        avg_energy,
        entropy: 0.5 * log_vol,
        temperature: 1.0 / beta,
    }
}

/// The bracket `F_{beta, sigma^2} + (N/2) log(2 pi sigma^2) - log P(sigma^2)`.
fn sigma_bracket(view: &SpectralView, sigma_sq: f64, eta: f64, beta: Beta, prior: &NoisePrior) -> f64 {
    let n = view.n as f64;
    let fe = match beta {
        Beta::Finite(b) => conditional_free_energy_view(view, sigma_sq, eta, b).free_energy,
        Beta::Infinite => view.quad_form(sigma_sq * eta) / (2.0 * sigma_sq),
    };
    fe + 0.5 * n * (2.0 * PI * sigma_sq).ln() - prior.log_density(sigma_sq)
}

/// Normalized marginal `P_beta(sigma^2 | D)` on `(0, 10 v0)`, with `v0` the ridge residual
/// mean square. Held in shifted log-space.
#[derive(Debug, Clone)]
pub struct SigmaMarginal {
    view: SpectralView,
    eta: f64,
    beta: f64,
    prior: NoisePrior,
    pub sigma_max: f64,
    pub mode: f64,
    /// `max log w`, where `w = exp(-beta * bracket)`.
    pub log_peak: f64,
    /// `log int exp(log w - log_peak)`.
    pub log_norm: f64,
    pub partition: Vec<(f64, f64)>,
}

impl SigmaMarginal {
    pub fn new(view: &SpectralView, eta: f64, beta: Beta, prior: &NoisePrior) -> Result<Self> {
        let b = finite_beta(beta)?;
        if prior.pinned().is_some() {
            return Err(Error::Domain("a point-mass prior has no continuous marginal".into()));
        }
        let sigma_max = 10.0 * initial_sigma(view, eta)?;
        let mut m = SigmaMarginal {
            view: view.clone(),
            eta,
            beta: b,
            prior: *prior,
            sigma_max,
            mode: f64::NAN,
            log_peak: 0.0,
            log_norm: 0.0,
            partition: vec![],
        };
        let lo = sigma_max * 1e-6;
        let k_max = 240;
        let grid: Vec<f64> = (0..=k_max).map(|k| lo * (sigma_max / lo).powf(k as f64 / k_max as f64)).collect();
        let vals: Vec<f64> = grid.iter().map(|&s| m.log_weight(s)).collect();
        let (k, _) = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or(Error::EmptySupport)?;
        let (a, c) = (grid[k.saturating_sub(1)], grid[(k + 1).min(k_max)]);
        let (mode, neg) = golden_section_raw(&|s| -m.log_weight(s), a, c, 1e-12);
        m.mode = mode;
        m.log_peak = -neg;

        let h = 1e-4 * mode;
        let curv = (m.log_weight(mode + h) - 2.0 * m.log_peak + m.log_weight((mode - h).max(1e-300))) / (h * h);
        let width = if curv < 0.0 { (1.0 / -curv).sqrt() } else { 0.1 * mode };
        let mut points = vec![0.0, sigma_max];
        for k in [-12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0] {
            let p = mode + k * width;
            if p > 0.0 && p < sigma_max {
                points.push(p);
            }
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        let opts = QuadOptions { abs_tol: 1e-15 * width, rel_tol: 1e-10, max_intervals: 2000 };
        let mut total = 0.0;
        let mut partition = Vec::new();
        for w in points.windows(2) {
            let q = integrate(|s| m.shifted(s), w[0], w[1], opts)?;
            total += q.value;
            partition.extend(q.partition);
        }
        if !(total > 0.0) {
            return Err(Error::EmptySupport);
        }
        m.log_norm = total.ln();
        m.partition = partition;
        Ok(m)
    }

    /// `log w(sigma^2) = -beta [F + (N/2) log(2 pi sigma^2) - log P]`, `-inf` where undefined.
    pub fn log_weight(&self, sigma_sq: f64) -> f64 {
        if !(sigma_sq > 0.0) {
            return f64::NEG_INFINITY;
        }
        let v = -self.beta * sigma_bracket(&self.view, sigma_sq, self.eta, Beta::Finite(self.beta), &self.prior);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn shifted(&self, sigma_sq: f64) -> f64 {
        (self.log_weight(sigma_sq) - self.log_peak).exp()
    }

    pub fn density(&self, sigma_sq: f64) -> f64 {
        (self.log_weight(sigma_sq) - self.log_peak - self.log_norm).exp()
    }

    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        integrate_on(|s| self.density(s) * f(s), &self.partition)
    }

    /// `log int w(sigma^2) dsigma^2`.
    pub fn log_integral(&self) -> f64 {
        self.log_peak + self.log_norm
    }
}

/// Full free energy `F_beta[D]`.
///
/// Finite beta integrates the noise variance out; infinite beta minimizes the bracket.
/// A point-mass prior uses the known-variance relation `F_{beta, sigma0^2} - (N / 2 beta) log(2 pi sigma0^2)`.
pub fn full_free_energy(instance: &RegressionInstance, eta: f64, beta: Beta, prior: &NoisePrior) -> Result<f64> {
    prior.validate()?;
    let view = SpectralView::of(instance)?;
    let n = instance.n() as f64;
    if let Some(s0) = prior.pinned() {
        view.check_shift(s0 * eta)?;
        return Ok(match beta {
            Beta::Finite(b) => conditional_free_energy_view(&view, s0, eta, b).free_energy - n / (2.0 * b) * (2.0 * PI * s0).ln(),
            Beta::Infinite => view.quad_form(s0 * eta) / (2.0 * s0),
        });
    }
    match beta {
        Beta::Finite(b) => Ok(-SigmaMarginal::new(&view, eta, beta, prior)?.log_integral() / b),
        Beta::Infinite => Ok(minimize_bracket(&view, eta, beta, prior)?.1),
    }
}

/// Large-N (Laplace) form: `min over sigma^2` of the bracket, returning `(argmin, min)`.
pub fn full_free_energy_laplace(
    instance: &RegressionInstance,
    eta: f64,
    beta: Beta,
    prior: &NoisePrior,
) -> Result<(f64, f64)> {
    prior.validate()?;
    let view = SpectralView::of(instance)?;
    if let Some(s0) = prior.pinned() {
        return Ok((s0, sigma_bracket(&view, s0, eta, beta, &NoisePrior::Flat)));
    }
    minimize_bracket(&view, eta, beta, prior)
}

fn minimize_bracket(view: &SpectralView, eta: f64, beta: Beta, prior: &NoisePrior) -> Result<(f64, f64)> {
    let sigma_max = 10.0 * initial_sigma(view, eta)?;
    // Search in log sigma^2 so that the tolerance is relative.
    let (x, f) = golden_section(
        |x| sigma_bracket(view, x.exp(), eta, beta, prior),
        (sigma_max * 1e-12).ln(),
        sigma_max.ln(),
        1e-12,
    )?;
    Ok((x.exp(), f))
}

/// Normalized `P_beta(sigma^2 | D)` on an increasing positive grid (trapezoid normalization).
pub fn marginal_sigma_density(
    instance: &RegressionInstance,
    eta: f64,
    beta: Beta,
    prior: &NoisePrior,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let b = finite_beta(beta)?;
    prior.validate()?;
    if prior.pinned().is_some() {
        return Err(Error::Domain("a point-mass prior has no density".into()));
    }
    if grid.len() < 2 || grid[0] <= 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("grid must be positive, strictly increasing, with at least two points".into()));
    }
    let view = SpectralView::of(instance)?;
    let logw: Vec<f64> = grid
        .iter()
        .map(|&s| {
            let v = -b * sigma_bracket(&view, s, eta, beta, prior);
            if v.is_nan() { f64::NEG_INFINITY } else { v }
        })
        .collect();
    let peak = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::EmptySupport);
    }
    let w: Vec<f64> = logw.iter().map(|v| (v - peak).exp()).collect();
    let area: f64 = grid.windows(2).zip(w.windows(2)).map(|(g, y)| 0.5 * (g[1] - g[0]) * (y[0] + y[1])).sum();
    if !(area > 0.0) {
        return Err(Error::EmptySupport);
    }
    Ok(w.into_iter().map(|x| x / area).collect())
}

fn require_positive_support(rho: &SpectralDensity) -> Result<()> {
    let m = support_min(rho);
    if !(m > 0.0) {
        return Err(Error::SpectrumDomain(format!("density has mass at lambda = {m}, where log is undefined")));
    }
    Ok(())
}

fn require_positive_grid(corr: &CorrelationKernel) -> Result<()> {
    match corr.grid.first() {
        Some(&g) if g > 0.0 => Ok(()),
        Some(&g) => Err(Error::SpectrumDomain(format!("kernel grid starts at {g}; log is undefined"))),
        None => Err(Error::SpectrumDomain("empty kernel grid".into())),
    }
}

/// `(zeta / 2 beta) log(beta / (2 pi sigma^2 zeta))`, zero at infinite beta.
fn entropy_offset(zeta: f64, beta: Beta, sigma_sq: f64) -> f64 {
    match beta {
        Beta::Finite(b) => zeta / (2.0 * b) * (b / (2.0 * PI * sigma_sq * zeta)).ln(),
        Beta::Infinite => 0.0,
    }
}

/// Noise-averaged `F/N` for ML inference given the spectrum of `C`.
pub fn ml_avg_fe_density(zeta: f64, beta: Beta, sigma_sq: f64, sigma0_sq: f64, rho: &SpectralDensity) -> Result<f64> {
    check_positive("sigma^2", sigma_sq)?;
    require_positive_support(rho)?;
    let t = beta.temperature();
    let log_term = if t == 0.0 { 0.0 } else { zeta * t / 2.0 * spectral_integral(rho, f64::ln)? };
    Ok(0.5 * sigma0_sq / sigma_sq * (1.0 - zeta) + entropy_offset(zeta, beta, sigma_sq) + log_term)
}

/// `Var(F/N)` for ML inference: correlation-kernel part plus the exact `1/N` term.
pub fn ml_fe_density_variance(
    zeta: f64,
    beta: Beta,
    sigma_sq: f64,
    sigma0_sq: f64,
    n: usize,
    corr: &CorrelationKernel,
) -> Result<f64> {
    check_positive("sigma^2", sigma_sq)?;
    require_positive_grid(corr)?;
    let t = beta.temperature();
    let kernel = zeta * zeta * t * t / 4.0 * corr.double_integral(f64::ln, f64::ln)?;
    Ok(kernel + sigma0_sq.powi(2) * (1.0 - zeta) / (2.0 * sigma_sq.powi(2) * n as f64))
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Asymptotic free-energy density of ML inference with `Sigma = I` and a flat prior,
/// minimized over `sigma^2`. Divergent for `beta < zeta`.
pub fn asymptotic_ml_fe(zeta: f64, beta: Beta, sigma0_sq: f64) -> Result<FeValue> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Domain(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    check_positive("sigma0^2", sigma0_sq)?;
    // x = 1 - zeta / beta runs from 0 (beta = zeta) to 1 (beta = infinity).
    let x = match beta {
        Beta::Infinite => 1.0,
        Beta::Finite(b) if b < zeta => return Ok(FeValue::Divergent),
        Beta::Finite(b) => 1.0 - zeta / b,
    };
    let log_moment = crate::spectra::mp_log_moment(zeta);
    let f = 0.5 * x * (1.0 + (2.0 * PI * sigma0_sq * (1.0 - zeta)).ln()) - 0.5 * xlogx(x) - 0.5 * xlogx(1.0 - x)
        + 0.5 * (1.0 - x) * log_moment;
    Ok(FeValue::Finite(f))
}

/// Teacher- and noise-averaged `F/N` for ridge inference with `theta0 ~ N(0, S^2 I)`.
#[allow(clippy::too_many_arguments)]
pub fn map_avg_fe_density(
    zeta: f64,
    beta: Beta,
    sigma_sq: f64,
    sigma0_sq: f64,
    eta: f64,
    theta_prior_var: f64,
    rho: &SpectralDensity,
) -> Result<f64> {
    check_positive("sigma^2", sigma_sq)?;
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be nonnegative, got {eta}")));
    }
    let c = zeta * sigma_sq * eta;
    if c == 0.0 {
        require_positive_support(rho)?;
    }
    let t = beta.temperature();
    let ratio = spectral_integral(rho, |l| l / (l + c))?;
    let mut out = t * zeta / 2.0
        + theta_prior_var * zeta * eta / 2.0 * ratio
        + sigma0_sq / (2.0 * sigma_sq) * (1.0 - zeta * ratio);
    if t > 0.0 {
        out += t * zeta / 2.0 * spectral_integral(rho, |l| (l + c).ln())?
            - t * zeta / 2.0 * (2.0 * PI * E * sigma_sq * zeta * t).ln();
    }
    Ok(out)
}

/// Correlation-kernel part of `Var(F/N)` for ridge inference with a random teacher.
///
/// The `O(1/N)` remainder has no closed form over the design ensemble and is estimated
/// separately (see [`map_fe_conditional_variance`]).
#[allow(clippy::too_many_arguments)]
pub fn map_fe_density_variance(
    zeta: f64,
    beta: Beta,
    sigma_sq: f64,
    sigma0_sq: f64,
    eta: f64,
    theta_prior_var: f64,
    corr: &CorrelationKernel,
) -> Result<f64> {
    check_positive("sigma^2", sigma_sq)?;
    let c = zeta * sigma_sq * eta;
    let t = beta.temperature();
    if c == 0.0 && t > 0.0 {
        require_positive_grid(corr)?;
    }
    let (s2, s0, v) = (theta_prior_var, sigma0_sq, sigma_sq);
    let r = |l: f64| l / (l + c);
    let lg = |l: f64| if t > 0.0 { (l + c).ln() } else { 0.0 };
    let product = zeta * zeta / (4.0 * v * v) * (s2 * s2 * v * v * eta * eta + s0 * s0 - 2.0 * s0 * s2 * v * eta);
    let loglog = t * t * zeta * zeta / 4.0;
    let cross = t * zeta * zeta / (2.0 * v) * (s2 * v * eta - s0);
    Ok(product * corr.double_integral(r, r)?
        + loglog * corr.double_integral(lg, lg)?
        + cross * corr.double_integral(r, lg)?)
}

/// Exact variance of `F/N` over `(theta0, eps)` at a fixed design, given the eigenvalues of `C`.
///
/// Averaging this over designs gives the `1/N` remainder of the ridge free-energy variance.
pub fn map_fe_conditional_variance(
    eigenvalues: &[f64],
    zeta: f64,
    sigma_sq: f64,
    sigma0_sq: f64,
    eta: f64,
    theta_prior_var: f64,
    n: usize,
) -> f64 {
    let c = zeta * sigma_sq * eta;
    let d = eigenvalues.len() as f64;
    let n_f = n as f64;
    let col: f64 = eigenvalues
        .iter()
        .map(|&l| {
            if c == 0.0 {
                0.0
            } else {
                (sigma_sq * eta * (theta_prior_var * l + zeta * sigma0_sq) / (l + c)).powi(2)
            }
        })
        .sum();
    2.0 * (col + (n_f - d) * sigma0_sq.powi(2)) / (4.0 * sigma_sq.powi(2) * n_f * n_f)
}

/// Asymptotic free-energy curves on a temperature grid, one block per `zeta`.
pub fn fe_curve(zeta_list: &[f64], temperature_grid: &[f64], sigma0_sq: f64) -> Result<Vec<FreeEnergyCurvePoint>> {
    let mut out = Vec::with_capacity(zeta_list.len() * temperature_grid.len());
    for &zeta in zeta_list {
        for &t in temperature_grid {
            check_positive("temperature", t)?;
            // T = 1/zeta computed in floating point sits on the finite side of the transition.
            let value = if t * zeta > 1.0 + 4.0 * f64::EPSILON {
                FeValue::Divergent
            } else {
                let beta = Beta::new(1.0 / t)?;
                let beta = match beta {
                    Beta::Finite(b) if b < zeta => Beta::Finite(zeta),
                    other => other,
                };
                asymptotic_ml_fe(zeta, beta, sigma0_sq)?
            };
            out.push(FreeEnergyCurvePoint { temperature: t, zeta, value });
        }
    }
    Ok(out)
}
