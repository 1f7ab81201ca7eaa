//! Adaptive Gauss-Kronrod (7/15) quadrature and golden-section minimization.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Values that can be integrated: reals and complex numbers.
pub trait QuadValue: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(self) -> f64;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

impl QuadValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(self) -> f64 {
        self.norm()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (plus the centre).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point panel: (Kronrod estimate, |Kronrod - Gauss|).
pub fn gk15<T: QuadValue>(f: &impl Fn(f64) -> T, a: f64, b: f64) -> (T, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let dx = h * XGK[k];
        let s = f(c - dx) + f(c + dx);
        kronrod = kronrod + s * WGK[k];
        if k % 2 == 1 {
            gauss = gauss + s * WG[k / 2];
        }
    }
    (kronrod * h, (kronrod - gauss).magnitude() * h.abs())
}

#[derive(Debug, Clone)]
pub struct Quadrature<T> {
    pub value: T,
    pub error: f64,
    /// Final subintervals, sorted by left endpoint.
    pub partition: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-13, rel_tol: 1e-10, max_intervals: 4000 }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        QuadOptions { rel_tol, ..Self::default() }
    }
}

/// Globally adaptive bisection until the summed error estimate is within tolerance.
pub fn integrate<T: QuadValue>(
    f: impl Fn(f64) -> T,
    a: f64,
    b: f64,
    opts: QuadOptions,
) -> Result<Quadrature<T>> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(Quadrature { value: T::zero(), error: 0.0, partition: vec![] });
    }
    let mut panels: Vec<(f64, f64, T, f64)> = Vec::new();
    let (v, e) = gk15(&f, a, b);
    panels.push((a, b, v, e));
    loop {
        let mut total = T::zero();
        let mut err = 0.0;
        let mut worst = 0;
        for (k, p) in panels.iter().enumerate() {
            total = total + p.2;
            err += p.3;
            if p.3 > panels[worst].3 {
                worst = k;
            }
        }
        if !total.magnitude().is_finite() || !err.is_finite() {
            return Err(Error::Quadrature("integrand produced a non-finite value".into()));
        }
        let target = opts.abs_tol.max(opts.rel_tol * total.magnitude());
        let (lo, hi, _, _) = panels[worst];
        let mid = 0.5 * (lo + hi);
        if err <= target || !(mid > lo && mid < hi) {
            if err > target && err > 100.0 * target {
                return Err(Error::Quadrature(format!(
                    "interval [{lo}, {hi}] cannot be subdivided further (error {err:.3e})"
                )));
            }
            panels.sort_by(|x, y| x.0.total_cmp(&y.0));
            return Ok(Quadrature {
                value: total,
                error: err,
                partition: panels.iter().map(|p| (p.0, p.1)).collect(),
            });
        }
        if panels.len() >= opts.max_intervals {
            return Err(Error::Quadrature(format!(
                "{} subintervals exhausted (error {err:.3e}, target {target:.3e})",
                opts.max_intervals
            )));
        }
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        panels[worst] = (lo, mid, v1, e1);
        panels.push((mid, hi, v2, e2));
    }
}

/// Applies the 15-point rule on a fixed partition (typically one returned by [`integrate`]).
pub fn integrate_on<T: QuadValue>(f: impl Fn(f64) -> T, partition: &[(f64, f64)]) -> T {
    partition.iter().fold(T::zero(), |acc, &(a, b)| acc + gk15(&f, a, b).0)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for an interior minimum of a unimodal `f` on `[a, b]`.
///
/// Returns `(x, f(x))`. Fails with `OptimizerNoBracket` if the minimum sits on an endpoint.
pub fn golden_section(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<(f64, f64)> {
    let (x, fx) = golden_section_raw(&f, a, b, tol);
    let edge = tol.max(1e-12 * (b - a).abs()) * 4.0;
    if (x - a).abs() <= edge || (b - x).abs() <= edge {
        return Err(Error::OptimizerNoBracket);
    }
    Ok((x, fx))
}

/// Golden-section search that accepts endpoint minima.
pub fn golden_section_raw(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + c.abs().min(d.abs())) {
        if fc < fd || (fd.is_nan() && !fc.is_nan()) {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    let mut best = (x, fx);
    for (xx, ff) in [(c, fc), (d, fd)] {
        if ff < best.1 {
            best = (xx, ff);
        }
    }
    best
}
