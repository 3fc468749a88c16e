//! Oracles for the induced regression: rotations, Monte Carlo, quadrature,
//! finite differences, the KL bound and the induced prior.

use fin_core::distributions::{std_normal, std_normal_vec};
use fin_core::model::{
    factor_posterior_moments, induced_coefficients, induced_polynomial, kl_bound_check, simulate_induced_prior,
    FactorLoadings, NoiseVariances, RegressionCoefficients,
};
use fin_core::rng::RngStream;
use fin_core::sampler::steps::{eta_log_density_and_grad, latent_mean};
use fin_core::sampler::{Dataset, Hyperparams, ModelState, ResponseModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{gauss_hermite, random_orthogonal};

pub struct Params {
    pub loadings: FactorLoadings,
    pub noise: NoiseVariances,
    pub coef: RegressionCoefficients,
}

pub fn random_symmetric<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| std_normal(rng));
    (&m + m.transpose()) * 0.5
}

pub fn random_params<R: Rng + ?Sized>(p: usize, k: usize, lambda_sd: f64, rng: &mut R) -> Params {
    let lambda = DMatrix::from_fn(p, k, |_, _| lambda_sd * std_normal(rng));
    let psi_diag = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
    let mut coef = RegressionCoefficients::zeros(k);
    coef.omega = std_normal_vec(k, rng);
    coef.big_omega = random_symmetric(k, rng) * 0.5;
    Params {
        loadings: FactorLoadings::unmasked(lambda),
        noise: NoiseVariances { psi_diag, sigma2_y: rng.random_range(0.2..1.0) },
        coef,
    }
}

/// Largest induced-coefficient change over `n_rot` random rotations of
/// `(Lambda, omega, Omega)` at `p = 12`, `k = 4`.
pub fn rotation_max_diff(n_rot: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..n_rot {
        let par = random_params(12, 4, 1.0, &mut rng);
        let base = induced_coefficients(&factor_posterior_moments(&par.loadings, &par.noise).unwrap(), &par.coef).unwrap();
        let r = random_orthogonal(4, &mut rng);
        let rot_loadings = FactorLoadings::unmasked(&par.loadings.lambda * &r);
        let mut rot_coef = RegressionCoefficients::zeros(4);
        rot_coef.omega = r.transpose() * &par.coef.omega;
        rot_coef.big_omega = r.transpose() * &par.coef.big_omega * &r;
        let rotated =
            induced_coefficients(&factor_posterior_moments(&rot_loadings, &par.noise).unwrap(), &rot_coef).unwrap();
        worst = worst.max(base.max_abs_diff(&rotated));
    }
    worst
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    /// largest |analytic - MC| / MC standard error for `E[y | X]`
    pub max_z_mean: f64,
    /// same for `Cov(y, X)` against `Lambda omega`
    pub max_z_cov: f64,
}

/// `E[y | X]` by self-normalised importance sampling from the prior of
/// `eta` (no use of the factor posterior), and `Cov(y, X)` from joint
/// simulation, both with `n_draws` draws, for `n_sets` random parameter sets.
pub fn proposition_monte_carlo(n_sets: usize, n_points: usize, n_draws: usize, seed: u64) -> MonteCarloReport {
    let mut max_z_mean: f64 = 0.0;
    let mut max_z_cov: f64 = 0.0;
    for set in 0..n_sets {
        let mut rng = RngStream::new(seed, set as u64).rng();
        let p = rng.random_range(2..=5);
        let k = rng.random_range(1..=3usize.min(p));
        let par = random_params(p, k, 0.7, &mut rng);
        let induced = induced_coefficients(&factor_posterior_moments(&par.loadings, &par.noise).unwrap(), &par.coef).unwrap();
        let lambda = &par.loadings.lambda;
        let psi = &par.noise.psi_diag;

        // joint simulation for the covariance identity
        let mut sy = 0.0;
        let mut sx = DVector::zeros(p);
        let mut sxy = DVector::zeros(p);
        let mut sxy2 = DVector::zeros(p);
        let mut rows = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let eta = std_normal_vec(k, &mut rng);
            let x = lambda * &eta + DVector::from_fn(p, |j, _| psi[j].sqrt() * std_normal(&mut rng));
            let y = latent_mean(&par.coef, &eta) + par.noise.sigma2_y.sqrt() * std_normal(&mut rng);
            sy += y;
            sx += &x;
            rows.push((y, x));
        }
        let nf = n_draws as f64;
        let (my, mx) = (sy / nf, sx / nf);
        for (y, x) in &rows {
            let c = (x - &mx) * (y - my);
            sxy += &c;
            sxy2 += c.component_mul(&c);
        }
        let cov = &sxy / nf;
        let target = lambda * &par.coef.omega;
        for j in 0..p {
            let se = ((sxy2[j] / nf - cov[j] * cov[j]) / nf).sqrt();
            max_z_cov = max_z_cov.max((cov[j] - target[j]).abs() / se);
        }
        drop(rows);

        // importance sampling from the prior for E[y | X]
        let etas: Vec<DVector<f64>> = (0..n_draws).map(|_| std_normal_vec(k, &mut rng)).collect();
        let f: Vec<f64> = etas.iter().map(|e| latent_mean(&par.coef, e)).collect();
        for _ in 0..n_points {
            let eta0 = std_normal_vec(k, &mut rng);
            let x = lambda * &eta0 + DVector::from_fn(p, |j, _| psi[j].sqrt() * std_normal(&mut rng));
            let logw: Vec<f64> = etas
                .iter()
                .map(|e| {
                    let r = &x - lambda * e;
                    -0.5 * (0..p).map(|j| r[j] * r[j] / psi[j]).sum::<f64>()
                })
                .collect();
            let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let sw: f64 = w.iter().sum();
            let est = w.iter().zip(&f).map(|(w, f)| w * f).sum::<f64>() / sw;
            let var = w.iter().zip(&f).map(|(w, f)| (w * (f - est)).powi(2)).sum::<f64>() / (sw * sw);
            let analytic = induced.predict_mean(&x, None);
            max_z_mean = max_z_mean.max((analytic - est).abs() / var.sqrt());
        }
    }
    MonteCarloReport { max_z_mean, max_z_cov }
}

#[derive(Debug, Clone)]
pub struct QuadratureReport {
    /// largest |induced - quadrature| over Q = 3, 4
    pub max_err_higher: f64,
    /// largest difference between the Q = 2 polynomial path and the quadratic path
    pub max_err_q2: f64,
}

/// Compares the polynomial expansion with Gauss-Hermite quadrature of
/// `E[sum_q omega^(q) eta^q | X]` over `eta_h | X ~ N(mu_h, V_hh)`.
pub fn higher_order_vs_quadrature(n_sets: usize, n_points: usize, seed: u64) -> QuadratureReport {
    let (nodes, weights) = gauss_hermite(20);
    let mut max_err_higher: f64 = 0.0;
    let mut max_err_q2: f64 = 0.0;
    for set in 0..n_sets {
        let mut rng = RngStream::new(seed, set as u64).rng();
        let p = rng.random_range(2..=6);
        let k = rng.random_range(1..=3);
        let par = random_params(p, k, 0.7, &mut rng);
        let moments = factor_posterior_moments(&par.loadings, &par.noise).unwrap();
        for q in [3usize, 4] {
            let ws: Vec<DVector<f64>> = (0..q).map(|_| std_normal_vec(k, &mut rng)).collect();
            let induced = induced_polynomial(&moments, &ws).unwrap();
            for _ in 0..n_points {
                let x = DVector::from_fn(p, |_, _| 1.5 * std_normal(&mut rng));
                let mu = &moments.a * &x;
                let mut quad = 0.0;
                for h in 0..k {
                    let sd = moments.v[(h, h)].sqrt();
                    for (t, wt) in nodes.iter().zip(&weights) {
                        let e = mu[h] + sd * t;
                        quad += wt * (0..q).map(|qi| ws[qi][h] * e.powi(qi as i32 + 1)).sum::<f64>();
                    }
                }
                max_err_higher = max_err_higher.max((induced.predict_mean(&x, None) - quad).abs());
            }
        }
        let ws = vec![std_normal_vec(k, &mut rng), std_normal_vec(k, &mut rng)];
        let poly = induced_polynomial(&moments, &ws).unwrap();
        let mut coef = RegressionCoefficients::zeros(k);
        coef.omega = ws[0].clone();
        coef.big_omega = DMatrix::from_diagonal(&ws[1]);
        let quad_path = induced_coefficients(&moments, &coef).unwrap();
        max_err_q2 = max_err_q2.max(poly.max_abs_diff(&quad_path));
    }
    QuadratureReport { max_err_higher, max_err_q2 }
}

/// Largest relative gap between the analytic gradient of the factor full
/// conditional and central differences over `n_states` random states.
/// `with_covariates` adds `Z` with `alpha` and `Delta`; `polynomial` uses the
/// diagonal order-3 response.
pub fn gradient_max_rel_error(n_states: usize, with_covariates: bool, polynomial: bool, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..n_states {
        let mut rng = RngStream::new(seed, s as u64).rng();
        let (n, p, k) = (3, rng.random_range(2..=6), rng.random_range(1..=4));
        let q = if with_covariates { 2 } else { 0 };
        let hyper = Hyperparams {
            k,
            prior_var_coef: 1.0,
            inv_gamma_shape: 3.0,
            inv_gamma_rate: 2.0,
            response: if polynomial { ResponseModel::Polynomial { order: 3 } } else { ResponseModel::Quadratic },
            ..Hyperparams::default()
        };
        let mut state = ModelState::sample_prior(n, p, q, &hyper, &mut rng).unwrap();
        state.x_imputed = DMatrix::from_fn(n, p, |_, _| std_normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| 2.0 * std_normal(&mut rng));
        let z = with_covariates.then(|| DMatrix::from_fn(n, q, |_, _| std_normal(&mut rng)));
        let data = Dataset::fully_observed(y, state.x_imputed.clone(), z).unwrap();
        let i = rng.random_range(0..n);
        let (_, g) = eta_log_density_and_grad(&state, &data, i);
        let scale = g.amax().max(1.0);
        for c in 0..k {
            let h = 1e-5 * state.eta[(i, c)].abs().max(1.0);
            let eval = |d: f64| {
                let mut st = state.clone();
                st.eta[(i, c)] += d;
                eta_log_density_and_grad(&st, &data, i).0
            };
            // fourth-order central difference
            let fd = (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h);
            worst = worst.max((fd - g[c]).abs() / scale);
        }
    }
    worst
}

/// Number of violations of the KL bound over `n` random instances, and the
/// smallest slack `bound - kl`.
pub fn kl_bound_violations(n: usize, seed: u64) -> (usize, f64) {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for t in 0..n {
        let mut rng = RngStream::new(seed, t as u64).rng();
        let p = rng.random_range(3..=15);
        let k0 = rng.random_range(2..=p);
        let k = rng.random_range(1..k0);
        let s0 = (rng.random_range(-3.0..2.0f64)).exp();
        let l0 = DMatrix::from_fn(p, k0, |_, _| std_normal(&mut rng));
        let r = kl_bound_check(&l0, s0, k).unwrap();
        if !r.holds() {
            violations += 1;
        }
        min_slack = min_slack.min(r.bound - r.kl);
    }
    (violations, min_slack)
}

#[derive(Debug, Clone)]
pub struct InducedPriorReport {
    /// central 50% widths (main, pairwise, third order) at k = 5 and k = 10
    pub widths_k5: [f64; 3],
    pub widths_k10: [f64; 3],
}

impl InducedPriorReport {
    pub fn shrinks_with_order(&self) -> bool {
        [self.widths_k5, self.widths_k10].iter().all(|w| w[0] > w[1] && w[1] > w[2])
    }

    pub fn widens_with_k(&self) -> bool {
        (0..3).all(|o| self.widths_k10[o] > self.widths_k5[o])
    }
}

pub fn induced_prior_report(n_draws: usize, seed: u64) -> InducedPriorReport {
    let w = |k| simulate_induced_prior(20, k, 0.5, n_draws, seed).unwrap().central_widths(0.5);
    InducedPriorReport { widths_k5: w(5), widths_k10: w(10) }
}
