//! Sample-covariance spectra, the Marchenko-Pastur law, spectral integrals and the
//! two-point correlation kernel of the empirical density.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpectralDensity;
use crate::quad::{integrate, QuadOptions};

/// Ascending eigenvalues of `C = Z0^T Z0 / N`.
///
/// For a scaled design (`Z = Z0 / sqrt(d)`) this is `d Z^T Z / N`; otherwise `Z^T Z / N`.
pub fn covariance_eigenvalues(design: &DMatrix<f64>, scaled: bool) -> Result<Vec<f64>> {
    let (n, d) = design.shape();
    let factor = if scaled { d as f64 / n as f64 } else { 1.0 / n as f64 };
    Ok(gram_eigenvalues(design)?.into_iter().map(|x| x * factor).collect())
}

/// Ascending eigenvalues of the raw Gram matrix `J = Z^T Z`.
pub fn gram_eigenvalues(design: &DMatrix<f64>) -> Result<Vec<f64>> {
    if design.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("design has non-finite entries".into()));
    }
    let mut e: Vec<f64> = design.tr_mul(design).symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    let scale = e.last().copied().unwrap_or(0.0).abs().max(1.0);
    for x in e.iter_mut() {
        if *x < 0.0 {
            if *x < -1e-12 * scale {
                return Err(Error::Data(format!("Gram matrix has negative eigenvalue {x}")));
            }
            *x = 0.0;
        }
    }
    Ok(e)
}

/// Support edges `a_(-/+) = (1 -/+ sqrt(zeta))^2`.
pub fn mp_edges(zeta: f64) -> (f64, f64) {
    let r = zeta.sqrt();
    ((1.0 - r).powi(2), (1.0 + r).powi(2))
}

/// Marchenko-Pastur density for aspect ratio `zeta` in (0, 1).
pub fn mp_pdf(lambda: f64, zeta: f64) -> f64 {
    let (lo, hi) = mp_edges(zeta);
    if lambda <= lo || lambda >= hi {
        return 0.0;
    }
    ((lambda - lo) * (hi - lambda)).sqrt() / (2.0 * PI * zeta * lambda)
}

/// `lambda(u)` and `rho(lambda(u)) dlambda/du` under `lambda = a- + (a+ - a-) sin^2 u`.
fn mp_substitution(u: f64, zeta: f64) -> (f64, f64) {
    let (lo, hi) = mp_edges(zeta);
    let w = hi - lo;
    let (s, c) = u.sin_cos();
    let lambda = lo + w * s * s;
    (lambda, w * w * 2.0 * s * s * c * c / (2.0 * PI * zeta * lambda))
}

fn mp_integrate(zeta: f64, upper_u: f64, f: &impl Fn(f64) -> f64, rel_tol: f64) -> Result<f64> {
    let bad = std::cell::Cell::new(None);
    let q = integrate(
        |u| {
            let (lambda, w) = mp_substitution(u, zeta);
            let v = f(lambda);
            if !v.is_finite() {
                bad.set(Some(lambda));
                return 0.0;
            }
            v * w
        },
        0.0,
        upper_u,
        QuadOptions::rel(rel_tol),
    )?;
    if let Some(lambda) = bad.get() {
        return Err(Error::Integrand(lambda));
    }
    Ok(q.value)
}

/// Marchenko-Pastur cumulative distribution function.
pub fn mp_cdf(lambda: f64, zeta: f64) -> f64 {
    let (lo, hi) = mp_edges(zeta);
    if lambda <= lo {
        return 0.0;
    }
    if lambda >= hi {
        return 1.0;
    }
    let u = ((lambda - lo) / (hi - lo)).sqrt().asin();
    mp_integrate(zeta, u, &|_| 1.0, 1e-12).unwrap_or(f64::NAN).clamp(0.0, 1.0)
}

/// `int rho(lambda) log(lambda) dlambda` under the Marchenko-Pastur law.
pub fn mp_log_moment(zeta: f64) -> f64 {
    -1.0 - (1.0 - zeta) / zeta * (1.0 - zeta).ln()
}

/// `int rho(lambda) f(lambda) dlambda`.
pub fn spectral_integral(rho: &SpectralDensity, f: impl Fn(f64) -> f64) -> Result<f64> {
    match rho {
        SpectralDensity::Samples { eigenvalues } => {
            let mut sum = 0.0;
            for &lambda in eigenvalues {
                let v = f(lambda);
                if !v.is_finite() {
                    return Err(Error::Integrand(lambda));
                }
                sum += v;
            }
            Ok(sum / eigenvalues.len() as f64)
        }
        SpectralDensity::MarchenkoPastur { zeta } => mp_integrate(*zeta, FRAC_PI_2, &f, 1e-10),
        SpectralDensity::Histogram { edges, masses } => {
            let mut sum = 0.0;
            for (k, &m) in masses.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                let c = 0.5 * (edges[k] + edges[k + 1]);
                let v = f(c);
                if !v.is_finite() {
                    return Err(Error::Integrand(c));
                }
                sum += m * v;
            }
            Ok(sum)
        }
    }
}

/// Smallest point of the support (or of the histogram bins with mass).
pub fn support_min(rho: &SpectralDensity) -> f64 {
    match rho {
        SpectralDensity::Samples { eigenvalues } => eigenvalues[0],
        SpectralDensity::MarchenkoPastur { zeta } => mp_edges(*zeta).0,
        SpectralDensity::Histogram { edges, masses } => {
            let k = masses.iter().position(|&m| m > 0.0).unwrap_or(0);
            edges[k]
        }
    }
}

/// Ensemble covariance of binned empirical spectral densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    /// Bin centers.
    pub grid: Vec<f64>,
    pub edges: Vec<f64>,
    /// `C(b, b')`, covariance of the density values in bins `b` and `b'`.
    pub matrix: DMatrix<f64>,
    pub ensemble_size: usize,
}

impl CorrelationKernel {
    /// Kernel that is identically zero on the given edges.
    pub fn zero(edges: Vec<f64>) -> Self {
        let b = edges.len() - 1;
        let grid = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        CorrelationKernel { grid, edges, matrix: DMatrix::zeros(b, b), ensemble_size: 0 }
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `int int C(l, l~) f(l) g(l~) dl dl~` with `f, g` evaluated at bin centers.
    pub fn double_integral(&self, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> Result<f64> {
        let w = self.widths();
        let fv = self.weighted(&f, &w)?;
        let gv = self.weighted(&g, &w)?;
        Ok((fv.transpose() * &self.matrix * gv)[(0, 0)])
    }

    /// `int int C(l, l~) K(l, l~) dl dl~` for a general two-point kernel.
    pub fn double_integral_2d(&self, k: impl Fn(f64, f64) -> f64) -> Result<f64> {
        let w = self.widths();
        let b = self.grid.len();
        let mut sum = 0.0;
        for i in 0..b {
            for j in 0..b {
                let v = k(self.grid[i], self.grid[j]);
                if !v.is_finite() {
                    return Err(Error::SpectrumDomain(format!(
                        "kernel not finite at ({}, {})",
                        self.grid[i], self.grid[j]
                    )));
                }
                sum += self.matrix[(i, j)] * v * w[i] * w[j];
            }
        }
        Ok(sum)
    }

    fn weighted(&self, f: &impl Fn(f64) -> f64, w: &[f64]) -> Result<nalgebra::DVector<f64>> {
        let mut out = nalgebra::DVector::zeros(self.grid.len());
        for (k, &c) in self.grid.iter().enumerate() {
            let v = f(c);
            if !v.is_finite() {
                return Err(Error::SpectrumDomain(format!("integrand not finite at bin center {c}")));
            }
            out[k] = v * w[k];
        }
        Ok(out)
    }
}

/// Freedman-Diaconis bin count for `xs` (sorted), capped at 64.
pub fn freedman_diaconis_bins(sorted: &[f64]) -> usize {
    let n = sorted.len();
    if n < 4 {
        return 1;
    }
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        sorted[i] + frac * (sorted[(i + 1).min(n - 1)] - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let range = sorted[n - 1] - sorted[0];
    if !(iqr > 0.0) || !(range > 0.0) {
        return 1;
    }
    let h = 2.0 * iqr / (n as f64).cbrt();
    ((range / h).ceil() as usize).clamp(1, 64)
}

/// Estimates `C(l, l~) = <rho rho~> - <rho><rho~>` from an ensemble of spectra on a common grid.
///
/// `bins = None` selects the Freedman-Diaconis count of the pooled sample.
pub fn estimate_correlation_kernel(ensemble: &[Vec<f64>], bins: Option<usize>) -> Result<CorrelationKernel> {
    if ensemble.len() < 30 {
        return Err(Error::EnsembleTooSmall(ensemble.len()));
    }
    let mut pooled: Vec<f64> = ensemble.iter().flatten().copied().collect();
    if pooled.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite eigenvalue in ensemble".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let b = bins.unwrap_or_else(|| freedman_diaconis_bins(&pooled)).max(1);
    let lo = pooled[0];
    let mut hi = *pooled.last().unwrap();
    if hi <= lo {
        hi = lo + 1.0;
    }
    // Widen the top edge a hair so the maximum lands inside the last bin.
    let hi = hi + 1e-12 * (hi - lo).max(hi.abs());
    let edges: Vec<f64> = (0..=b).map(|k| lo + (hi - lo) * k as f64 / b as f64).collect();
    let width = (hi - lo) / b as f64;

    let r = ensemble.len();
    let mut dens = DMatrix::<f64>::zeros(r, b);
    for (i, spec) in ensemble.iter().enumerate() {
        for &x in spec {
            let k = (((x - lo) / width) as usize).min(b - 1);
            dens[(i, k)] += 1.0;
        }
        let norm = spec.len() as f64 * width;
        for k in 0..b {
            dens[(i, k)] /= norm;
        }
    }
    let mean = dens.row_mean();
    let mut centered = dens.clone();
    for i in 0..r {
        for k in 0..b {
            centered[(i, k)] -= mean[k];
        }
    }
    let matrix = centered.tr_mul(&centered) / (r as f64 - 1.0);
    let grid = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(CorrelationKernel { grid, edges, matrix, ensemble_size: r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_design, SeedSpec};
    use crate::stats::ks_statistic;
    use proptest::prelude::*;

    #[test]
    fn edges_and_outside() {
        let (lo, hi) = mp_edges(0.25);
        assert!((lo - 0.25).abs() < 1e-15 && (hi - 2.25).abs() < 1e-15);
        assert_eq!(mp_pdf(0.1, 0.25), 0.0);
        assert_eq!(mp_pdf(3.0, 0.25), 0.0);
    }

    #[test]
    fn mp_moments() {
        for zeta in [0.1, 0.5, 0.9] {
            let rho = SpectralDensity::marchenko_pastur(zeta).unwrap();
            let m0 = spectral_integral(&rho, |_| 1.0).unwrap();
            let m1 = spectral_integral(&rho, |l| l).unwrap();
            let m2 = spectral_integral(&rho, |l| l * l).unwrap();
            let inv = spectral_integral(&rho, |l| 1.0 / l).unwrap();
            let lg = spectral_integral(&rho, f64::ln).unwrap();
            assert!((m0 - 1.0).abs() < 1e-8);
            assert!((m1 - 1.0).abs() < 1e-8);
            assert!((m2 - 1.0 - zeta).abs() < 1e-8);
            assert!((inv - 1.0 / (1.0 - zeta)).abs() < 1e-6);
            assert!((lg - mp_log_moment(zeta)).abs() < 1e-8);
        }
    }

    #[test]
    fn direct_density_integral_is_one() {
        // Independent route: integrate mp_pdf itself over the support.
        let (lo, hi) = mp_edges(0.3);
        let q = integrate(|l| mp_pdf(l, 0.3), lo, hi, QuadOptions::rel(1e-11)).unwrap();
        assert!((q.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn small_zeta_concentrates() {
        let zeta = 1e-3;
        let rho = SpectralDensity::marchenko_pastur(zeta).unwrap();
        let m1 = spectral_integral(&rho, |l| l).unwrap();
        let var = spectral_integral(&rho, |l| (l - 1.0).powi(2)).unwrap();
        assert!((m1 - 1.0).abs() < 1e-8);
        assert!((var - zeta).abs() < 1e-8);
    }

    #[test]
    fn cdf_endpoints() {
        assert_eq!(mp_cdf(0.0, 0.5), 0.0);
        assert_eq!(mp_cdf(10.0, 0.5), 1.0);
        let (lo, hi) = mp_edges(0.5);
        let mid = 0.5 * (lo + hi);
        let q = integrate(|l| mp_pdf(l, 0.5), lo, mid, QuadOptions::rel(1e-11)).unwrap();
        assert!((mp_cdf(mid, 0.5) - q.value).abs() < 1e-8);
    }

    #[test]
    fn orthonormal_columns_give_unit_spectrum() {
        let n = 8;
        let mut z = DMatrix::<f64>::zeros(n, 3);
        for j in 0..3 {
            z[(j, j)] = (n as f64).sqrt();
        }
        let e = covariance_eigenvalues(&z, false).unwrap();
        assert!(e.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn trace_identity_and_scaling() {
        let z = sample_design(50, 10, &DMatrix::identity(10, 10), true, SeedSpec::new(5, 3)).unwrap();
        let e = covariance_eigenvalues(&z, true).unwrap();
        let tr = z.norm_squared() * 10.0 / 50.0;
        assert!((e.iter().sum::<f64>() / tr - 1.0).abs() < 1e-10);
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empirical_spectrum_close_to_mp() {
        let z = sample_design(2000, 1000, &DMatrix::identity(1000, 1000), true, SeedSpec::new(17, 0)).unwrap();
        let e = covariance_eigenvalues(&z, true).unwrap();
        let d = ks_statistic(&e, |l| mp_cdf(l, 0.5));
        assert!(d < 0.05, "KS distance {d}");
    }

    #[test]
    fn kernel_of_identical_spectra_is_zero() {
        let spec = vec![0.2, 0.5, 0.9, 1.4, 2.2];
        let ens = vec![spec; 40];
        let k = estimate_correlation_kernel(&ens, None).unwrap();
        assert!(k.matrix.iter().all(|&x| x.abs() < 1e-12));
        assert!(matches!(estimate_correlation_kernel(&ens[..10], None), Err(Error::EnsembleTooSmall(10))));
    }

    #[test]
    fn kernel_double_integral_is_binned_linear_statistic_variance() {
        // The double integral of f x f equals the variance of the bin-center linear statistic.
        let ens: Vec<Vec<f64>> = (0..60)
            .map(|r| {
                let z = sample_design(40, 20, &DMatrix::identity(20, 20), true, SeedSpec::new(2, r)).unwrap();
                covariance_eigenvalues(&z, true).unwrap()
            })
            .collect();
        let k = estimate_correlation_kernel(&ens, Some(12)).unwrap();
        let w = k.widths()[0];
        let stats: Vec<f64> = ens
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&x| {
                        let b = (((x - k.edges[0]) / w) as usize).min(11);
                        k.grid[b].ln()
                    })
                    .sum::<f64>()
                    / s.len() as f64
            })
            .collect();
        let m = crate::stats::Moments::from_slice(&stats);
        let v = k.double_integral(f64::ln, f64::ln).unwrap();
        assert!((v - m.variance()).abs() < 1e-10 * m.variance().max(1e-300), "{v} vs {}", m.variance());
    }

    #[test]
    fn kernel_shrinks_with_dimension() {
        let kern = |d: usize| {
            let ens: Vec<Vec<f64>> = (0..200)
                .map(|r| {
                    let z = sample_design(2 * d, d, &DMatrix::identity(d, d), true, SeedSpec::new(d as u64, r)).unwrap();
                    covariance_eigenvalues(&z, true).unwrap()
                })
                .collect();
            estimate_correlation_kernel(&ens, Some(16)).unwrap().matrix.norm()
        };
        let ratio = kern(400) / kern(100);
        assert!(ratio < 0.5, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn left_orthogonal_invariance(seed in 0u64..500) {
            let z = sample_design(12, 4, &DMatrix::identity(4, 4), false, SeedSpec::new(seed, 1)).unwrap();
            let g = sample_design(12, 12, &DMatrix::identity(12, 12), false, SeedSpec::new(seed, 2)).unwrap();
            let q = g.qr().q();
            let a = covariance_eigenvalues(&z, false).unwrap();
            let b = covariance_eigenvalues(&(q * &z), false).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn samples_integral_is_mean(xs in prop::collection::vec(0.01f64..5.0, 1..40)) {
            let rho = SpectralDensity::samples(xs.clone()).unwrap();
            let v = spectral_integral(&rho, |l| l * l).unwrap();
            let m = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
            prop_assert!((v - m).abs() < 1e-12 * (1.0 + m));
        }
    }
}
