//! KS and moment oracles for every sampler, shared by the distribution tests
//! and the acceptance run.

use fin_core::distributions::{
    sample_dirichlet_via_gamma, sample_gamma, sample_gig, sample_inverse_gaussian, sample_mvn,
    sample_truncated_normal,
};
use fin_core::rng::RngStream;
use fin_core::stats::{ks_one_sample, ks_two_sample, mean, variance};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Beta, ContinuousCDF, Gamma, Normal};

use super::simpson;

pub const ALPHA: f64 = 0.001;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: String) -> Check {
    Check { name: name.into(), pass, detail }
}

fn ks_check(name: String, xs: &[f64], cdf: impl Fn(f64) -> f64) -> Check {
    let r = ks_one_sample(xs, cdf);
    check(name, r.p_value > ALPHA, format!("D = {:.4}, p = {:.3}", r.statistic, r.p_value))
}

fn phi(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

fn draws(n: usize, seed: u64, mut f: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 0).rng();
    (0..n).map(|_| f(&mut rng)).collect()
}

/// CDF of `x^{p-1} exp(-(a x + b / x) / 2)` tabulated by Simpson panels.
pub struct GigCdf {
    grid: Vec<f64>,
    cum: Vec<f64>,
    pub mean: f64,
}

impl GigCdf {
    pub fn new(p: f64, a: f64, b: f64) -> Self {
        let log_dens = |x: f64| (p - 1.0) * x.ln() - 0.5 * (a * x + b / x);
        // upper end where the density is negligible relative to its mode
        let mode = ((p - 1.0) + ((p - 1.0).powi(2) + a * b).sqrt()) / a;
        let peak = log_dens(mode.max(1e-300));
        let mut hi = mode.max(1.0);
        while log_dens(hi) > peak - 60.0 {
            hi *= 1.5;
        }
        let n = 200_000;
        let h = hi / n as f64;
        let dens = |x: f64| if x <= 0.0 { 0.0 } else { (log_dens(x) - peak).exp() };
        let mut grid = Vec::with_capacity(n + 1);
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        let mut m1 = 0.0;
        grid.push(0.0);
        cum.push(0.0);
        for i in 0..n {
            let (x0, x1) = (i as f64 * h, (i + 1) as f64 * h);
            let seg = simpson(dens, x0, x1, 2);
            m1 += simpson(|x| x * dens(x), x0, x1, 2);
            acc += seg;
            grid.push(x1);
            cum.push(acc);
        }
        for c in &mut cum {
            *c /= acc;
        }
        Self { grid, cum, mean: m1 / acc }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let h = self.grid[1];
        let i = (x / h).floor() as usize;
        if i + 1 >= self.grid.len() {
            return 1.0;
        }
        let t = (x - self.grid[i]) / h;
        self.cum[i] + t * (self.cum[i + 1] - self.cum[i])
    }
}

pub fn inverse_gaussian_cdf(mu: f64, lambda: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = (lambda / x).sqrt();
    let tail = (2.0 * lambda / mu).exp() * phi(-s * (x / mu + 1.0));
    phi(s * (x / mu - 1.0)) + if tail.is_finite() { tail } else { 0.0 }
}

fn truncated_normal_cdf(mu: f64, sd: f64, lo: f64, hi: f64, x: f64) -> f64 {
    let n = Normal::new(mu, sd).unwrap();
    // upper-tail mass ratios keep precision far from the mean
    if lo > mu {
        let (sl, sh) = (n.sf(lo), n.sf(hi));
        return ((sl - n.sf(x)) / (sl - sh)).clamp(0.0, 1.0);
    }
    let (cl, ch) = (n.cdf(lo), n.cdf(hi));
    ((n.cdf(x) - cl) / (ch - cl)).clamp(0.0, 1.0)
}

pub fn run_all(n: usize) -> Vec<Check> {
    let mut out = Vec::new();

    for (i, &(mu, lambda)) in [(1.0, 1.0), (2.0, 1.0), (0.3, 5.0), (50.0, 0.5)].iter().enumerate() {
        let xs = draws(n, 100 + i as u64, |r| sample_inverse_gaussian(mu, lambda, r).unwrap());
        out.push(ks_check(format!("inverse Gaussian ({mu}, {lambda}) KS"), &xs, |x| inverse_gaussian_cdf(mu, lambda, x)));
    }
    let xs = draws(100_000, 110, |r| sample_inverse_gaussian(1.0, 1.0, r).unwrap());
    out.push(check("inverse Gaussian (1, 1) mean", (mean(&xs) - 1.0).abs() < 0.02, format!("{:.4}", mean(&xs))));
    let xs = draws(100_000, 111, |r| sample_inverse_gaussian(2.0, 1.0, r).unwrap());
    let v = variance(&xs);
    out.push(check("inverse Gaussian (2, 1) variance", (v / 8.0 - 1.0).abs() < 0.10, format!("{v:.3} vs 8")));

    for (i, &(p, a, b)) in [(1.0, 2.0, 2.0), (-0.5, 0.25, 1.0), (-1.5, 1.0, 0.01), (3.0, 0.5, 4.0), (-9.5, 1.0, 3.0)]
        .iter()
        .enumerate()
    {
        let oracle = GigCdf::new(p, a, b);
        let xs = draws(n, 200 + i as u64, |r| sample_gig(p, a, b, r).unwrap());
        out.push(ks_check(format!("GIG ({p}, {a}, {b}) KS"), &xs, |x| oracle.cdf(x)));
    }
    let oracle = GigCdf::new(1.0, 2.0, 2.0);
    let xs = draws(100_000, 210, |r| sample_gig(1.0, 2.0, 2.0, r).unwrap());
    let m = mean(&xs);
    out.push(check("GIG (1, 2, 2) mean", (m / oracle.mean - 1.0).abs() < 0.02, format!("{m:.4} vs {:.4}", oracle.mean)));
    let (mu, lambda) = (1.5, 2.0);
    let a = draws(10_000, 211, |r| sample_gig(-0.5, lambda / (mu * mu), lambda, r).unwrap());
    let b = draws(10_000, 212, |r| sample_inverse_gaussian(mu, lambda, r).unwrap());
    let d = ks_two_sample(&a, &b).statistic;
    out.push(check("GIG(-1/2) vs inverse Gaussian", d < 0.03, format!("D = {d:.4}")));

    for (i, &(mu, s2, lo, hi)) in [
        (0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY),
        (0.0, 1.0, f64::NEG_INFINITY, 0.0),
        (5.0, 1.0, f64::NEG_INFINITY, 0.0),
        (-1.0, 4.0, 6.0, f64::INFINITY),
        (0.3, 0.5, -0.2, 0.1),
    ]
    .iter()
    .enumerate()
    {
        let xs = draws(n, 300 + i as u64, |r| sample_truncated_normal(mu, s2, lo, hi, r).unwrap());
        let inside = xs.iter().all(|&x| x.is_finite() && x >= lo && x <= hi);
        out.push(check(format!("truncated normal ({mu}, {s2}, [{lo}, {hi}]) support"), inside, String::new()));
        out.push(ks_check(format!("truncated normal ({mu}, {s2}, [{lo}, {hi}]) KS"), &xs, |x| {
            truncated_normal_cdf(mu, s2.sqrt(), lo, hi, x)
        }));
    }
    let xs = draws(100_000, 310, |r| sample_truncated_normal(0.0, 1.0, f64::NEG_INFINITY, 0.0, r).unwrap());
    let m = mean(&xs);
    let half = -(2.0 / std::f64::consts::PI).sqrt();
    out.push(check("half-normal mean", (m - half).abs() < 0.02, format!("{m:.4} vs {half:.4}")));
    let xs = draws(100_000, 311, |r| sample_truncated_normal(5.0, 1.0, f64::NEG_INFINITY, 0.0, r).unwrap());
    let m = mean(&xs);
    // E[X | X <= 0] for N(5, 1): 5 - phi(-5) / Phi(-5), with a continued-fraction Mills ratio
    let z = 5.0;
    let mills = 1.0 / (z + 1.0 / (z + 2.0 / (z + 3.0 / (z + 4.0 / (z + 5.0 / (z + 6.0 / z))))));
    let tail_mean = 5.0 - 1.0 / mills;
    out.push(check("far-tail truncated normal mean", (m / tail_mean - 1.0).abs() < 0.05, format!("{m:.4} vs {tail_mean:.4}")));

    for (i, &(shape, rate)) in [(2.0, 4.0), (0.25, 0.5), (7.5, 0.1), (1.0, 0.5)].iter().enumerate() {
        let g = Gamma::new(shape, rate).unwrap();
        let xs = draws(n, 400 + i as u64, |r| sample_gamma(shape, rate, r).unwrap());
        out.push(ks_check(format!("gamma ({shape}, {rate}) KS"), &xs, |x| g.cdf(x)));
    }
    let xs = draws(100_000, 410, |r| sample_gamma(2.0, 4.0, r).unwrap());
    out.push(check("gamma (2, 4) mean", (mean(&xs) / 0.5 - 1.0).abs() < 0.01, format!("{:.4}", mean(&xs))));
    let xs = draws(100_000, 411, |r| sample_gamma(0.25, 0.5, r).unwrap());
    let ok = (mean(&xs) / 0.5 - 1.0).abs() < 0.02 && xs.iter().all(|&x| x > 0.0);
    out.push(check("gamma (0.25, 0.5) mean, no zeros", ok, format!("{:.4}", mean(&xs))));

    for (i, &(a, dim)) in [(1.0, 3usize), (0.5, 4), (0.1, 10)].iter().enumerate() {
        let beta = Beta::new(a, a * (dim as f64 - 1.0)).unwrap();
        let mut rng = RngStream::new(500 + i as u64, 0).rng();
        let mut first = Vec::with_capacity(n);
        let mut sums_ok = true;
        for _ in 0..n {
            let v = sample_dirichlet_via_gamma(a, dim, &mut rng).unwrap();
            sums_ok &= (v.iter().sum::<f64>() - 1.0).abs() < 1e-12;
            first.push(v[0]);
        }
        out.push(check(format!("Dirichlet ({a}, {dim}) sums to 1"), sums_ok, String::new()));
        out.push(ks_check(format!("Dirichlet ({a}, {dim}) marginal KS"), &first, |x| beta.cdf(x)));
    }
    let mut rng = RngStream::new(510, 0).rng();
    let mut acc = [0.0; 3];
    for _ in 0..100_000 {
        let v = sample_dirichlet_via_gamma(1.0, 3, &mut rng).unwrap();
        for h in 0..3 {
            acc[h] += v[h] / 100_000.0;
        }
    }
    out.push(check("Dirichlet (1, 3) means", acc.iter().all(|m| (m - 1.0 / 3.0).abs() < 0.01), format!("{acc:.4?}")));

    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let mean_v = DVector::from_vec(vec![1.0, -1.0]);
    for (i, w) in [[1.0f64, 0.0], [0.0, 1.0], [1.0, -2.0]].iter().enumerate() {
        let w = DVector::from_row_slice(w);
        let sd = w.dot(&(&cov * &w)).sqrt();
        let m = w.dot(&mean_v);
        let nd = Normal::new(m, sd).unwrap();
        let xs = draws(n, 600 + i as u64, |r| w.dot(&sample_mvn(&mean_v, &cov, r).unwrap()));
        out.push(ks_check(format!("multivariate normal projection {i} KS"), &xs, |x| nd.cdf(x)));
    }
    let mut rng = RngStream::new(610, 0).rng();
    let zs: Vec<DVector<f64>> = (0..100_000).map(|_| sample_mvn(&DVector::zeros(2), &cov, &mut rng).unwrap()).collect();
    let mut emp = DMatrix::zeros(2, 2);
    for z in &zs {
        emp += z * z.transpose() / zs.len() as f64;
    }
    let err = (emp - &cov).amax();
    out.push(check("multivariate normal covariance", err < 0.05, format!("max error {err:.4}")));
    out
}
