//! Streaming moments and Kolmogorov-Smirnov tests.

use serde::{Deserialize, Serialize};

/// One-pass mean/variance (Welford) with exact pairwise merging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::new();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }

    /// Standard error of the sample variance, from the fourth-moment-free normal
    /// approximation `var * sqrt(2 / (n - 1))`.
    pub fn variance_std_error(&self) -> f64 {
        self.variance() * (2.0 / (self.count as f64 - 1.0)).sqrt()
    }
}

/// One-pass covariance of a pair, mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoMoments {
    pub count: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c: f64,
}

impl CoMoments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.count += 1;
        let n = self.count as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c += dx * (y - self.mean_y);
    }

    pub fn merge(&mut self, o: &CoMoments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let dx = o.mean_x - self.mean_x;
        let dy = o.mean_y - self.mean_y;
        self.m2_x += o.m2_x + dx * dx * na * nb / n;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.c += o.c + dx * dy * na * nb / n;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.count += o.count;
    }

    pub fn covariance(&self) -> f64 {
        self.c / (self.count as f64 - 1.0)
    }

    pub fn variance_x(&self) -> f64 {
        self.m2_x / (self.count as f64 - 1.0)
    }

    pub fn variance_y(&self) -> f64 {
        self.m2_y / (self.count as f64 - 1.0)
    }

    pub fn correlation(&self) -> f64 {
        self.c / (self.m2_x * self.m2_y).sqrt()
    }

    /// Standard error of the sample covariance under the null of zero correlation,
    /// `sqrt(var_x var_y / n)`.
    pub fn covariance_std_error(&self) -> f64 {
        (self.variance_x() * self.variance_y() / self.count as f64).sqrt()
    }
}

/// Two-sided one-sample KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |acc: f64, (i, &x)| {
        let f = cdf(x);
        acc.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value of a KS statistic `d` with `n` samples (Stephens' small-n correction).
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.5, -0.25, 3.0, 7.75, 2.0, 2.0];
        let m = Moments::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((m.mean - mean).abs() < 1e-15);
        assert!((m.variance() - var).abs() < 1e-13);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Standard table values of the Kolmogorov distribution.
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn ks_uniform_grid_is_tiny() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.0005).abs() < 1e-12);
        assert!(ks_p_value(d, 1000) > 0.99);
    }

    proptest! {
        #[test]
        fn merge_is_exact(xs in prop::collection::vec(-1e3f64..1e3, 2..60), ys in prop::collection::vec(-1e3f64..1e3, 2..60)) {
            let mut a = Moments::from_slice(&xs);
            a.merge(&Moments::from_slice(&ys));
            let all: Vec<f64> = xs.iter().chain(&ys).copied().collect();
            let b = Moments::from_slice(&all);
            prop_assert_eq!(a.count, b.count);
            prop_assert!((a.mean - b.mean).abs() <= 1e-9 * (1.0 + b.mean.abs()));
            prop_assert!((a.variance() - b.variance()).abs() <= 1e-8 * (1.0 + b.variance()));
        }

        #[test]
        fn comoments_match_two_pass(pairs in prop::collection::vec((-10f64..10.0, -10f64..10.0), 3..50), split in 1usize..3) {
            let cut = (pairs.len() / (split + 1)).max(1);
            let mut a = CoMoments::default();
            let mut b = CoMoments::default();
            for (i, &(x, y)) in pairs.iter().enumerate() {
                if i < cut { a.push(x, y) } else { b.push(x, y) }
            }
            a.merge(&b);
            let n = pairs.len() as f64;
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let cov = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / (n - 1.0);
            let vy = pairs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!((a.covariance() - cov).abs() < 1e-9);
            prop_assert!((a.variance_y() - vy).abs() < 1e-9);
        }
    }
}
