//! Synthetic benchmark: covariate scenarios, sparse quadratic truths under
//! strong heredity, and the metrics used to score an estimate.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::std_normal;
use crate::error::{invalid, FinError, Result};
use crate::model::InducedCoefficients;
use crate::rng::RngStream;
use crate::sampler::{run_chain_with, ChainOptions, ChainOutput, Dataset, Hyperparams};
use crate::stats::{equal_tailed_interval, mean};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `X ~ N(0, Lambda Lambda^T + I)` with standard normal loadings.
    Factor,
    /// `X ~ N(0, W)` with `W_ij = 0.8^|i-j|`.
    Linear,
    /// `X ~ N(0, I)`.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// 5% of the pairs interact.
    Sparse,
    /// 20% of the pairs interact.
    Dense,
}

impl Density {
    pub fn fraction(self) -> f64 {
        match self {
            Density::Sparse => 0.05,
            Density::Dense => 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub p: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub scenario: Scenario,
    /// Number of true factors; [`default_k_true`] when absent.
    pub k_true: Option<usize>,
    pub density: Density,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            p: 10,
            n_train: 500,
            n_test: 500,
            scenario: Scenario::Factor,
            k_true: None,
            density: Density::Sparse,
            noise_sd: 1.0,
            seed: 1,
        }
    }
}

/// 7 factors at `p = 25`, 17 at `p = 50`, about `0.3 p` otherwise.
pub fn default_k_true(p: usize) -> usize {
    match p {
        25 => 7,
        50 => 17,
        _ => ((0.3 * p as f64).round() as usize).max(1),
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(invalid(format!("p must be at least 2, got {}", self.p)));
        }
        if self.n_train < 2 || self.n_test < 1 {
            return Err(invalid("need n_train >= 2 and n_test >= 1"));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(invalid("noise_sd must be positive"));
        }
        if self.k_true == Some(0) {
            return Err(invalid("k_true must be at least 1"));
        }
        Ok(())
    }

    pub fn k_true(&self) -> usize {
        self.k_true.unwrap_or_else(|| default_k_true(self.p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta0: DVector<f64>,
    /// Symmetric with zero diagonal; `y` contains `x^T Omega0 x`.
    pub omega0: DMatrix<f64>,
    pub main_support: Vec<usize>,
    /// Pairs `(j, l)` with `j < l`.
    pub interaction_support: Vec<(usize, usize)>,
    /// Population covariance of `X`.
    pub covariance: DMatrix<f64>,
}

impl GroundTruth {
    pub fn mean(&self, x: &DVector<f64>) -> f64 {
        self.beta0.dot(x) + x.dot(&(&self.omega0 * x))
    }

    pub fn satisfies_heredity(&self) -> bool {
        let p = self.beta0.len();
        (0..p).all(|j| {
            (0..p).all(|l| j == l || self.omega0[(j, l)] == 0.0 || (self.beta0[j] != 0.0 && self.beta0[l] != 0.0))
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub truth: GroundTruth,
}

fn signed_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let m = rng.random_range(0.5..1.0);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn covariance(spec: &ScenarioSpec, rng: &mut impl Rng) -> DMatrix<f64> {
    let p = spec.p;
    match spec.scenario {
        Scenario::Independent => DMatrix::identity(p, p),
        Scenario::Linear => DMatrix::from_fn(p, p, |i, j| 0.8f64.powi(i.abs_diff(j) as i32)),
        Scenario::Factor => {
            let lambda = DMatrix::from_fn(p, spec.k_true(), |_, _| std_normal(rng));
            &lambda * lambda.transpose() + DMatrix::identity(p, p)
        }
    }
}

/// Draws a truth: `ceil(p/2)` nonzero main effects, then interacting pairs
/// among them covering `density` of all `p(p-1)/2` pairs (at least one).
pub fn generate_truth<R: Rng + ?Sized>(p: usize, density: Density, rng: &mut R) -> Result<(DVector<f64>, DMatrix<f64>, Vec<usize>, Vec<(usize, usize)>)> {
    let n_main = p.div_ceil(2);
    let mut main: Vec<usize> = sample(rng, p, n_main).into_vec();
    main.sort_unstable();
    let all_pairs = p * (p - 1) / 2;
    let target = ((density.fraction() * all_pairs as f64).round() as usize).max(1);
    let mut compatible = Vec::new();
    for (a, &j) in main.iter().enumerate() {
        for &l in &main[a + 1..] {
            compatible.push((j, l));
        }
    }
    if target > compatible.len() {
        return Err(FinError::Config(format!(
            "{target} interactions requested but only {} pairs satisfy strong heredity at p = {p}",
            compatible.len()
        )));
    }
    let mut pairs: Vec<(usize, usize)> =
        sample(rng, compatible.len(), target).into_iter().map(|i| compatible[i]).collect();
    pairs.sort_unstable();
    let mut beta = DVector::zeros(p);
    for &j in &main {
        beta[j] = signed_uniform(rng);
    }
    let mut omega = DMatrix::zeros(p, p);
    for &(j, l) in &pairs {
        let v = signed_uniform(rng);
        omega[(j, l)] = v;
        omega[(l, j)] = v;
    }
    Ok((beta, omega, main, pairs))
}

fn draw_rows(n: usize, chol_l: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    let p = chol_l.nrows();
    DMatrix::from_fn(n, p, |_, _| std_normal(rng)) * chol_l.transpose()
}

/// Training and test samples from one scenario. Deterministic in
/// `spec.seed`; truth, training and test rows use separate streams.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SimulatedData> {
    spec.validate()?;
    let mut rng_truth = RngStream { seed: spec.seed, stream_id: 0 }.rng();
    let cov = covariance(spec, &mut rng_truth);
    let (beta0, omega0, main_support, interaction_support) = generate_truth(spec.p, spec.density, &mut rng_truth)?;
    let l = cov.clone().cholesky().ok_or(FinError::NotPositiveDefinite { context: "scenario covariance" })?.l();
    let truth = GroundTruth { beta0, omega0, main_support, interaction_support, covariance: cov };
    let make = |n: usize, stream_id: u64| {
        let mut rng = RngStream { seed: spec.seed, stream_id }.rng();
        let x = draw_rows(n, &l, &mut rng);
        let y = DVector::from_fn(n, |i, _| truth.mean(&x.row(i).transpose()) + spec.noise_sd * std_normal(&mut rng));
        (x, y)
    };
    let (x_train, y_train) = make(spec.n_train, 1);
    let (x_test, y_test) = make(spec.n_test, 2);
    Ok(SimulatedData { x_train, y_train, x_test, y_test, truth })
}

/// Column means and standard deviations of training data, used to fit on
/// the standardized scale and report on the original one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

fn mean_sd(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let xs: Vec<f64> = v.collect();
    let m = mean(&xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64;
    (m, var.sqrt())
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let mut x_mean = Vec::with_capacity(x.ncols());
        let mut x_sd = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let (m, s) = mean_sd(x.column(j).iter().copied());
            if !(s > 0.0) {
                return Err(invalid(format!("column {j} has zero variance")));
            }
            x_mean.push(m);
            x_sd.push(s);
        }
        let (y_mean, y_sd) = mean_sd(y.iter().copied());
        if !(y_sd > 0.0) {
            return Err(invalid("response has zero variance"));
        }
        Ok(Self { x_mean, x_sd, y_mean, y_sd })
    }

    pub fn identity(p: usize) -> Self {
        Self { x_mean: vec![0.0; p], x_sd: vec![1.0; p], y_mean: 0.0, y_sd: 1.0 }
    }

    pub fn x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_sd[j])
    }

    pub fn y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_sd)
    }

    pub fn y_back(&self, v: f64) -> f64 {
        self.y_mean + self.y_sd * v
    }

    /// Rewrites a quadratic regression fitted on the standardized scale in
    /// terms of the original `x` and `y`. Higher-order terms are dropped and
    /// the covariate interactions are rescaled only (their shift belongs to
    /// the covariate main effects).
    pub fn back_transform(&self, c: &InducedCoefficients) -> InducedCoefficients {
        let p = self.x_mean.len();
        let inv_s = DVector::from_fn(p, |j, _| 1.0 / self.x_sd[j]);
        let m = DVector::from_vec(self.x_mean.clone());
        let w = DMatrix::from_fn(p, p, |j, l| c.omega_x[(j, l)] * inv_s[j] * inv_s[l]);
        let b = c.beta_x.component_mul(&inv_s);
        let wm = &w * &m;
        let intercept = c.intercept - b.dot(&m) + m.dot(&wm);
        InducedCoefficients {
            intercept: self.y_mean + self.y_sd * intercept,
            beta_x: (b - 2.0 * wm) * self.y_sd,
            omega_x: w * self.y_sd,
            covariate_int: c
                .covariate_int
                .as_ref()
                .map(|ci| DMatrix::from_fn(ci.nrows(), ci.ncols(), |j, l| ci[(j, l)] * inv_s[j] * self.y_sd)),
            higher_order: None,
        }
    }
}

/// Posterior means with entries set to exactly zero whenever the
/// equal-tailed interval at `level` contains zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub beta: DVector<f64>,
    pub omega: DMatrix<f64>,
}

fn zeroed_mean(xs: &[f64], level: f64) -> f64 {
    let (lo, hi) = equal_tailed_interval(xs, level);
    if lo <= 0.0 && hi >= 0.0 {
        0.0
    } else {
        mean(xs)
    }
}

pub fn posterior_point(draws: &[InducedCoefficients], level: f64) -> Result<PointEstimate> {
    let first = draws.first().ok_or_else(|| invalid("no posterior draws"))?;
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let p = first.beta_x.len();
    let beta = DVector::from_fn(p, |j, _| zeroed_mean(&draws.iter().map(|d| d.beta_x[j]).collect::<Vec<_>>(), level));
    let mut omega = DMatrix::zeros(p, p);
    for j in 0..p {
        for l in j..p {
            let v = zeroed_mean(&draws.iter().map(|d| d.omega_x[(j, l)]).collect::<Vec<_>>(), level);
            omega[(j, l)] = v;
            omega[(l, j)] = v;
        }
    }
    Ok(PointEstimate { beta, omega })
}

/// [`posterior_point`] applied to a chain's induced draws.
pub fn posterior_to_point(chain: &ChainOutput, level: f64) -> Result<PointEstimate> {
    posterior_point(&chain.induced_draws, level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub test_mse: f64,
    pub main_mse: f64,
    /// Frobenius norm of `Omega_hat - Omega0`.
    pub frobenius: f64,
    /// Share of nonzero true main effects estimated nonzero with the right sign.
    pub tp_main: f64,
    /// Share of zero true main effects estimated exactly zero.
    pub tn_main: f64,
    pub tp_int: f64,
    pub tn_int: f64,
}

fn rates(pairs: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (est, truth) in pairs {
        if truth != 0.0 {
            pos += 1;
            if est != 0.0 && est.signum() == truth.signum() {
                tp += 1;
            }
        } else {
            neg += 1;
            if est == 0.0 {
                tn += 1;
            }
        }
    }
    let r = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    (r(tp, pos), r(tn, neg))
}

/// Scores a point estimate and test-set predictions against the truth.
/// Interaction rates run over unordered pairs `j < l` and use the symmetric
/// part of `omega_hat`.
pub fn metrics(
    beta_hat: &DVector<f64>,
    omega_hat: &DMatrix<f64>,
    predictions: &DVector<f64>,
    truth: &GroundTruth,
    y_test: &DVector<f64>,
) -> Result<MetricReport> {
    let p = truth.beta0.len();
    if beta_hat.len() != p || omega_hat.shape() != (p, p) {
        return Err(invalid("estimate dimensions do not match the truth"));
    }
    if predictions.len() != y_test.len() || y_test.is_empty() {
        return Err(invalid("predictions and y_test differ in length"));
    }
    let test_mse = (predictions - y_test).norm_squared() / y_test.len() as f64;
    let main_mse = (beta_hat - &truth.beta0).norm_squared() / p as f64;
    let sym = (omega_hat + omega_hat.transpose()) * 0.5;
    let frobenius = (&sym - &truth.omega0).norm();
    let (tp_main, tn_main) = rates(beta_hat.iter().copied().zip(truth.beta0.iter().copied()));
    let pairs = (0..p).flat_map(|j| (j + 1..p).map(move |l| (j, l)));
    let (tp_int, tn_int) = rates(pairs.map(|(j, l)| (sym[(j, l)], truth.omega0[(j, l)])));
    Ok(MetricReport { test_mse, main_mse, frobenius, tp_main, tn_main, tp_int, tn_int })
}

/// Everything recorded for one simulated replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    pub metrics: MetricReport,
    /// Share of test responses inside their central predictive interval.
    pub predictive_coverage: f64,
    /// Share of true main effects inside their credible interval.
    pub main_coverage: f64,
    pub min_ess: f64,
    pub accept_rate: f64,
}

/// Generates one replicate, fits on standardized training data, and scores
/// the back-transformed posterior at credible `level`.
pub fn run_replicate(spec: &ScenarioSpec, hyper: &Hyperparams, level: f64) -> Result<ReplicateResult> {
    let sim = generate_scenario(spec)?;
    let std = Standardizer::fit(&sim.x_train, &sim.y_train)?;
    let data = Dataset::fully_observed(std.y(&sim.y_train), std.x(&sim.x_train), None)?;
    let opts = ChainOptions { x_test: Some(std.x(&sim.x_test)), ..Default::default() };
    let chain = run_chain_with(&data, hyper, &opts)?;
    let draws: Vec<InducedCoefficients> = chain.induced_draws.iter().map(|d| std.back_transform(d)).collect();
    let point = posterior_point(&draws, level)?;
    let pm = chain.predictive_mean().expect("test rows were supplied");
    let predictions = pm.map(|v| std.y_back(v));
    let report = metrics(&point.beta, &point.omega, &predictions, &sim.truth, &sim.y_test)?;
    let pd = chain.predictive_draws.as_ref().expect("test rows were supplied");
    let covered = (0..sim.y_test.len())
        .filter(|&i| {
            let row: Vec<f64> = pd.row(i).iter().map(|&v| std.y_back(v)).collect();
            let (lo, hi) = equal_tailed_interval(&row, level);
            (lo..=hi).contains(&sim.y_test[i])
        })
        .count();
    let p = spec.p;
    let main_cov = (0..p)
        .filter(|&j| {
            let d: Vec<f64> = draws.iter().map(|c| c.beta_x[j]).collect();
            let (lo, hi) = equal_tailed_interval(&d, level);
            (lo..=hi).contains(&sim.truth.beta0[j])
        })
        .count();
    Ok(ReplicateResult {
        seed: spec.seed,
        metrics: report,
        predictive_coverage: covered as f64 / sim.y_test.len() as f64,
        main_coverage: main_cov as f64 / p as f64,
        min_ess: chain.ess.iter().map(|e| e.ess).fold(f64::INFINITY, f64::min),
        accept_rate: chain.accept_rate_eta,
    })
}
