#![allow(dead_code)]

pub mod dist_suite;
pub mod induced_suite;

use fin_core::distributions::std_normal;
use fin_core::rng::RngStream;
use fin_core::sampler::steps::response_mean;
use fin_core::sampler::{sweep, CellStatus, Dataset, Hyperparams, ModelState, SweepContext};
use fin_core::stats::{ess, mean, variance};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

/// Nodes and weights of `n`-point Gauss-Hermite quadrature for the weight
/// `exp(-x^2 / 2) / sqrt(2 pi)`, from the eigen-decomposition of the
/// Jacobi matrix of the probabilists' Hermite polynomials.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |a, b| if a.abs_diff(b) == 1 { (a.max(b) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

pub fn random_orthogonal<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| std_normal(rng));
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DVector::from_fn(k, |i, _| r[(i, i)].signum());
    DMatrix::from_fn(k, k, |i, j| q[(i, j)] * signs[j])
}

/// Scalar summaries compared by the joint-distribution test.
pub const GEWEKE_NAMES: [&str; 8] =
    ["omega_1", "sigma2", "lambda_11^2", "tau_1", "imputed x_11", "Omega_12", "psi_1", "sigma_1^2"];

fn functionals(s: &ModelState) -> [f64; 8] {
    [
        s.coef.omega[0],
        s.noise.sigma2_y,
        s.loadings.lambda[(0, 0)].powi(2),
        s.tau[0],
        s.x_imputed[(0, 0)],
        s.coef.big_omega[(0, 1)],
        s.psi_local[(0, 0)],
        s.noise.psi_diag[0],
    ]
}

/// Draws every observed cell of `X` and all of `y` given the unknowns;
/// the missing cell keeps its latent value.
fn regenerate<R: Rng + ?Sized>(s: &mut ModelState, rng: &mut R) -> DVector<f64> {
    let (n, p) = (s.n(), s.p());
    let keep = s.x_imputed[(0, 0)];
    let fitted = &s.eta * s.loadings.lambda.transpose();
    for i in 0..n {
        for j in 0..p {
            s.x_imputed[(i, j)] = fitted[(i, j)] + s.noise.psi_diag[j].sqrt() * std_normal(rng);
        }
    }
    s.x_imputed[(0, 0)] = keep;
    DVector::from_fn(n, |i, _| {
        response_mean(&s.coef, &s.eta.row(i).transpose(), None) + s.noise.sigma2_y.sqrt() * std_normal(rng)
    })
}

fn dataset(s: &ModelState, y: DVector<f64>) -> Dataset {
    let (n, p) = (s.n(), s.p());
    let mut status = DMatrix::from_element(n, p, CellStatus::Observed);
    status[(0, 0)] = CellStatus::Missing;
    let mut x = s.x_imputed.clone();
    x[(0, 0)] = 0.0;
    Dataset::new(y, x, status, vec![None; p], None).unwrap()
}

pub struct GewekeReport {
    pub z: Vec<f64>,
}

/// Compares prior draws of the unknowns with the draws of a chain that
/// alternates "data given unknowns" and one sampler sweep. Both must target
/// the prior, so every `z` is approximately standard normal.
pub fn geweke(hyper: &Hyperparams, n: usize, p: usize, n_prior: usize, n_sweeps: usize, step: f64) -> GewekeReport {
    let mut rng = RngStream::new(hyper.seed, 1).rng();
    let mut prior: Vec<Vec<f64>> = vec![Vec::with_capacity(n_prior); GEWEKE_NAMES.len()];
    for _ in 0..n_prior {
        let mut s = ModelState::sample_prior(n, p, 0, hyper, &mut rng).unwrap();
        s.x_imputed[(0, 0)] = s.loadings.lambda.row(0).dot(&s.eta.row(0)) + s.noise.psi_diag[0].sqrt() * std_normal(&mut rng);
        for (v, f) in prior.iter_mut().zip(functionals(&s)) {
            v.push(f);
        }
    }
    let mut rng = RngStream::new(hyper.seed, 2).rng();
    let mut s = ModelState::sample_prior(n, p, 0, hyper, &mut rng).unwrap();
    s.x_imputed[(0, 0)] = s.loadings.lambda.row(0).dot(&s.eta.row(0)) + s.noise.psi_diag[0].sqrt() * std_normal(&mut rng);
    let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(n_sweeps); GEWEKE_NAMES.len()];
    for it in 0..n_sweeps {
        let y = regenerate(&mut s, &mut rng);
        let data = dataset(&s, y);
        sweep(&mut s, &data, hyper, SweepContext { iteration: it, step }).unwrap();
        for (v, f) in chain.iter_mut().zip(functionals(&s)) {
            v.push(f);
        }
    }
    let z = prior
        .iter()
        .zip(&chain)
        .map(|(a, b)| {
            let se2 = variance(a) / a.len() as f64 + variance(b) / ess(b).ess;
            (mean(a) - mean(b)) / se2.sqrt()
        })
        .collect();
    GewekeReport { z }
}

pub fn geweke_hyper(seed: u64) -> Hyperparams {
    Hyperparams {
        k: 2,
        prior_var_coef: 1.0,
        inv_gamma_shape: 4.0,
        inv_gamma_rate: 3.0,
        adapt_step: false,
        parallel: false,
        seed,
        n_iter: 2,
        n_burn: 1,
        ..Default::default()
    }
}
