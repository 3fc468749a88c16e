//! Small descriptive statistics and MCMC diagnostics.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], prob: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, prob)
}

/// Equal-tailed interval holding `level` of the mass.
pub fn equal_tailed_interval(xs: &[f64], level: f64) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let tail = 0.5 * (1.0 - level);
    (quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub ess: f64,
    /// Set when the sequence is constant and no autocorrelation exists.
    pub degenerate: bool,
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
///
/// Sums autocorrelations in adjacent pairs `Γ_m = ρ_{2m} + ρ_{2m+1}`, stops at
/// the first non-positive pair and forces the retained pairs to be
/// non-increasing. A constant sequence reports its length with
/// `degenerate = true`.
pub fn ess(draws: &[f64]) -> EssEstimate {
    let n = draws.len();
    if n < 4 {
        return EssEstimate { ess: n as f64, degenerate: true };
    }
    let m = mean(draws);
    let centered: Vec<f64> = draws.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if !(c0 > 1e-300) || !c0.is_finite() {
        return EssEstimate { ess: n as f64, degenerate: true };
    }
    let autocorr = |lag: usize| -> f64 {
        let s: f64 = centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum();
        s / n as f64 / c0
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = autocorr(lag) + autocorr(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        lag += 2;
    }
    // tau = -1 + 2 * sum_m Γ_m
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / (n as f64).log10().max(1.0));
    EssEstimate { ess: n as f64 / tau, degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function with Stephens' small-sample correction.
fn kolmogorov_sf(d: f64, n_eff: f64) -> f64 {
    let sq = n_eff.sqrt();
    let lam = (sq + 0.12 + 0.11 / sq) * d;
    if lam < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lam * lam).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> KsResult {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsResult { statistic: d, p_value: kolmogorov_sf(d, n) }
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    KsResult { statistic: d, p_value: kolmogorov_sf(d, n * m / (n + m)) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{norm_cdf, std_normal};
    use crate::rng::RngStream;

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert_eq!(quantile(&xs, 0.125), 1.5);
        assert_eq!(equal_tailed_interval(&xs, 1.0), (1.0, 5.0));
    }

    #[test]
    fn ess_iid() {
        let mut rng = RngStream::new(1, 1).rng();
        let xs: Vec<f64> = (0..1000).map(|_| std_normal(&mut rng)).collect();
        let e = ess(&xs);
        assert!(!e.degenerate);
        assert!((850.0..=1150.0).contains(&e.ess), "{}", e.ess);
    }

    #[test]
    fn ess_ar1() {
        let mut rng = RngStream::new(2, 1).rng();
        let rho: f64 = 0.9;
        let n = 10_000;
        let mut x = std_normal(&mut rng);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            x = rho * x + (1.0 - rho * rho).sqrt() * std_normal(&mut rng);
            xs.push(x);
        }
        let truth = n as f64 * (1.0 - rho) / (1.0 + rho);
        let e = ess(&xs).ess;
        assert!((e - truth).abs() / truth < 0.2, "{e} vs {truth}");
    }

    #[test]
    fn ess_constant_is_flagged() {
        let e = ess(&[3.0; 50]);
        assert!(e.degenerate);
        assert_eq!(e.ess, 50.0);
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = RngStream::new(3, 1).rng();
        let xs: Vec<f64> = (0..2000).map(|_| std_normal(&mut rng)).collect();
        assert!(ks_one_sample(&xs, norm_cdf).p_value > 0.001);
        assert!(ks_one_sample(&xs, |x| norm_cdf(x - 0.3)).p_value < 0.001);
        let ys: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        assert!(ks_two_sample(&xs, &ys).p_value < 0.001);
    }
}
