//! CSV and JSON writers for the CLI products.

use std::io::Write;

use serde::Serialize;

use crate::analytics::{mse_deviation_bound, mse_mean_var, noise_tail_bound};
use crate::error::{Error, Result};
use crate::freenergy::FreeEnergyCurvePoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::trials::TrialData;
use crate::model::FeValue;
use crate::spectra::{freedman_diaconis_bins, mp_pdf};

fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_rows<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// `zeta,temperature,f_beta,divergent`, sorted by `(zeta, temperature)`; `f_beta` is empty
/// where the free energy diverges.
pub fn write_fe_curve<W: Write>(out: W, points: &[FreeEnergyCurvePoint]) -> Result<()> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.zeta.total_cmp(&b.zeta).then(a.temperature.total_cmp(&b.temperature)));
    write_rows(
        out,
        &["zeta", "temperature", "f_beta", "divergent"],
        pts.iter().map(|p| {
            let (f, div) = match p.value {
                FeValue::Finite(v) => (sci(v), "0"),
                FeValue::Divergent => (String::new(), "1"),
            };
            vec![sci(p.zeta), sci(p.temperature), f, div.to_string()]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub lambda: f64,
    pub empirical_density: f64,
    pub mp_density: f64,
}

/// Histogram of pooled eigenvalues with Freedman-Diaconis bins, against the MP density at
/// each bin center.
pub fn spectrum_rows(eigenvalues: &[f64], zeta: f64, bins: Option<usize>) -> Result<Vec<SpectrumRow>> {
    let mut xs: Vec<f64> = eigenvalues.to_vec();
    if xs.len() < 2 {
        return Err(Error::Data("need at least two eigenvalues".into()));
    }
    xs.sort_by(f64::total_cmp);
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    if hi <= lo {
        return Err(Error::Data("eigenvalues are all equal".into()));
    }
    let k = bins.unwrap_or_else(|| freedman_diaconis_bins(&xs)).max(1);
    let width = (hi - lo) / k as f64;
    let mut counts = vec![0usize; k];
    for &x in &xs {
        counts[(((x - lo) / width) as usize).min(k - 1)] += 1;
    }
    let total = xs.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lambda = lo + (i as f64 + 0.5) * width;
            SpectrumRow { lambda, empirical_density: c as f64 / (total * width), mp_density: mp_pdf(lambda, zeta) }
        })
        .collect())
}

pub fn write_spectrum<W: Write>(out: W, rows: &[SpectrumRow]) -> Result<()> {
    write_rows(
        out,
        &["lambda", "empirical_density", "mp_density"],
        rows.iter().map(|r| vec![sci(r.lambda), sci(r.empirical_density), sci(r.mp_density)]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRow {
    pub delta: f64,
    pub bound: f64,
    pub empirical_frequency: f64,
    /// Lower/upper rates for the noise bound, minus/plus exponents for the MSE bound.
    pub first: f64,
    pub second: f64,
}

fn frequency(xs: &[f64], center: f64, delta: f64) -> f64 {
    xs.iter().filter(|x| (*x - center).abs() >= delta).count() as f64 / xs.len() as f64
}

/// Noise tail bound and the empirical frequency of `|sigma_ml - sigma0^2(1 - zeta)| >= delta`.
pub fn noise_bound_rows(cfg: &ExperimentConfig, data: &TrialData, deltas: &[f64]) -> Result<Vec<BoundRow>> {
    let xs: Vec<f64> = data.records.iter().map(|r| r.sigma_ml).collect();
    let center = cfg.sigma0_sq * (1.0 - cfg.zeta());
    deltas
        .iter()
        .map(|&delta| {
            let b = noise_tail_bound(delta, cfg.n, cfg.zeta(), cfg.sigma0_sq)?;
            Ok(BoundRow {
                delta,
                bound: b.bound,
                empirical_frequency: frequency(&xs, center, delta),
                first: b.lower_rate,
                second: b.upper_rate,
            })
        })
        .collect()
}

/// Optimized MSE deviation bound and the empirical frequency of `|mse - mu| >= delta`.
pub fn mse_bound_rows(cfg: &ExperimentConfig, data: &TrialData, deltas: &[f64]) -> Result<Vec<BoundRow>> {
    let eigs = cfg.population()?.eigenvalues();
    let (mu, _) = mse_mean_var(cfg.n, cfg.d, cfg.sigma0_sq, &eigs)?;
    let xs: Vec<f64> = data.records.iter().map(|r| r.mse).collect();
    deltas
        .iter()
        .map(|&delta| {
            let b = mse_deviation_bound(delta, None, cfg.n, cfg.d, cfg.sigma0_sq, eigs[0], eigs[eigs.len() - 1])?;
            Ok(BoundRow {
                delta,
                bound: b.bound,
                empirical_frequency: frequency(&xs, mu, delta),
                first: b.minus_exponent,
                second: b.plus_exponent,
            })
        })
        .collect()
}

pub fn write_noise_bounds<W: Write>(out: W, rows: &[BoundRow]) -> Result<()> {
    write_bounds(out, rows, ["lower_rate", "upper_rate"])
}

pub fn write_mse_bounds<W: Write>(out: W, rows: &[BoundRow]) -> Result<()> {
    write_bounds(out, rows, ["minus_exponent", "plus_exponent"])
}

fn write_bounds<W: Write>(out: W, rows: &[BoundRow], names: [&str; 2]) -> Result<()> {
    write_rows(
        out,
        &["delta", "bound", "empirical_frequency", names[0], names[1]],
        rows.iter().map(|r| vec![sci(r.delta), sci(r.bound), sci(r.empirical_frequency), sci(r.first), sci(r.second)]),
    )
}

/// Pretty JSON followed by a newline.
pub fn write_json<W: Write, T: Serialize + ?Sized>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}
