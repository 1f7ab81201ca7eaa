//! Dense linear algebra helpers: ridge Cholesky solves and a reusable eigen view of `J`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::RegressionInstance;

/// Relative pivot threshold below which `J + s I` is treated as singular.
const PIVOT_REL_TOL: f64 = 1e-11;

/// `J = Z^T Z`.
pub fn gram(design: &DMatrix<f64>) -> DMatrix<f64> {
    design.tr_mul(design)
}

/// Cholesky factor of `J + s I`, rejecting numerically singular systems.
pub fn ridge_cholesky(j: &DMatrix<f64>, s: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("ridge shift must be nonnegative, got {s}")));
    }
    let d = j.nrows();
    let mut a = j.clone();
    for i in 0..d {
        a[(i, i)] += s;
    }
    let scale = (0..d).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return Err(Error::SingularSystem);
    }
    let chol = Cholesky::new(a).ok_or(Error::SingularSystem)?;
    let l = chol.l_dirty();
    let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot <= PIVOT_REL_TOL * scale {
        return Err(Error::SingularSystem);
    }
    Ok(chol)
}

/// `log |A|` from a Cholesky factor.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `(J + s I)^{-1} Z^T t`.
pub fn ridge_solve(design: &DMatrix<f64>, targets: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
    let chol = ridge_cholesky(&gram(design), s)?;
    Ok(chol.solve(&design.tr_mul(targets)))
}

/// Eigendecomposition `J = U diag(mu) U^T` with the target projections `u = U^T Z^T t`,
/// so that every ridge quantity at any shift `s` costs `O(d)`.
#[derive(Debug, Clone)]
pub struct SpectralView {
    pub mu: DVector<f64>,
    pub basis: DMatrix<f64>,
    pub u: DVector<f64>,
    pub targets_sq: f64,
    pub n: usize,
}

impl SpectralView {
    pub fn new(design: &DMatrix<f64>, targets: &DVector<f64>) -> Result<Self> {
        if design.nrows() != targets.len() {
            return Err(Error::Shape("targets length differs from design rows".into()));
        }
        let eig = gram(design).symmetric_eigen();
        let u = eig.eigenvectors.tr_mul(&design.tr_mul(targets));
        let mu = eig.eigenvalues.map(|x| x.max(0.0));
        Ok(SpectralView { mu, basis: eig.eigenvectors, u, targets_sq: targets.norm_squared(), n: design.nrows() })
    }

    pub fn of(instance: &RegressionInstance) -> Result<Self> {
        Self::new(instance.design(), instance.targets())
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    /// Rejects a shift at which `J + s I` is numerically singular.
    pub fn check_shift(&self, s: f64) -> Result<()> {
        let max = self.mu.max() + s;
        let min = self.mu.min() + s;
        if !(max > 0.0) || min <= PIVOT_REL_TOL * max {
            return Err(Error::SingularSystem);
        }
        Ok(())
    }

    /// `theta(s) = (J + s I)^{-1} Z^T t`.
    pub fn theta(&self, s: f64) -> DVector<f64> {
        let w = DVector::from_fn(self.d(), |k, _| self.u[k] / (self.mu[k] + s));
        &self.basis * w
    }

    /// `t^T (I - Z (J + s I)^{-1} Z^T) t`.
    pub fn quad_form(&self, s: f64) -> f64 {
        let proj: f64 = self.u.iter().zip(self.mu.iter()).map(|(u, m)| u * u / (m + s)).sum();
        (self.targets_sq - proj).max(0.0)
    }

    /// `|theta(s)|^2`.
    pub fn theta_norm_sq(&self, s: f64) -> f64 {
        self.u.iter().zip(self.mu.iter()).map(|(u, m)| (u / (m + s)).powi(2)).sum()
    }

    /// `|t - Z theta(s)|^2`.
    pub fn rss(&self, s: f64) -> f64 {
        (self.quad_form(s) - s * self.theta_norm_sq(s)).max(0.0)
    }

    /// `log |J + s I|`.
    pub fn logdet(&self, s: f64) -> f64 {
        self.mu.iter().map(|m| (m + s).ln()).sum()
    }

    /// `Tr (J + s I)^{-1}`.
    pub fn trace_inv(&self, s: f64) -> f64 {
        self.mu.iter().map(|m| 1.0 / (m + s)).sum()
    }
}
