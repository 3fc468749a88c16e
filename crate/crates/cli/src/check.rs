use fin_core::distributions::{sample_gamma, sample_gig, sample_inverse_gaussian, std_normal, std_normal_vec};
use fin_core::model::{
    factor_posterior_moments, induced_coefficients, induced_polynomial, kl_bound_check, FactorLoadings,
    NoiseVariances, RegressionCoefficients,
};
use fin_core::rng::RngStream;
use fin_core::sampler::{run_chain, Dataset, Hyperparams};
use fin_core::simulation::{generate_scenario, ScenarioSpec};
use fin_core::stats::{ess, ks_two_sample, mean};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random_case<R: Rng>(p: usize, k: usize, rng: &mut R) -> (FactorLoadings, NoiseVariances, RegressionCoefficients) {
    let lambda = DMatrix::from_fn(p, k, |_, _| std_normal(rng));
    let psi = DVector::from_fn(p, |_, _| rng.random_range(0.5..1.5));
    let mut coef = RegressionCoefficients::zeros(k);
    coef.omega = std_normal_vec(k, rng);
    let m = DMatrix::from_fn(k, k, |_, _| std_normal(rng));
    coef.big_omega = (&m + m.transpose()) * 0.5;
    (FactorLoadings::unmasked(lambda), NoiseVariances { psi_diag: psi, sigma2_y: 1.0 }, coef)
}

fn rotation(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed, 1).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (l, noise, coef) = random_case(12, 4, &mut rng);
        let base = induced_coefficients(&factor_posterior_moments(&l, &noise).unwrap(), &coef).unwrap();
        let qr = DMatrix::from_fn(4, 4, |_, _| std_normal(&mut rng)).qr();
        let r = qr.q();
        let mut rc = RegressionCoefficients::zeros(4);
        rc.omega = r.transpose() * &coef.omega;
        rc.big_omega = r.transpose() * &coef.big_omega * &r;
        let rl = FactorLoadings::unmasked(&l.lambda * &r);
        let rot = induced_coefficients(&factor_posterior_moments(&rl, &noise).unwrap(), &rc).unwrap();
        worst = worst.max(base.max_abs_diff(&rot));
    }
    CheckResult { name: "rotation invariance", pass: worst < 1e-9, detail: format!("max diff {worst:.2e}") }
}

fn kl(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed, 2).rng();
    let mut bad = 0;
    for _ in 0..50 {
        let p = rng.random_range(3..=12);
        let k0 = rng.random_range(2..=p);
        let k = rng.random_range(1..k0);
        let l0 = DMatrix::from_fn(p, k0, |_, _| std_normal(&mut rng));
        let s0 = rng.random_range(0.1..3.0);
        if !kl_bound_check(&l0, s0, k).map(|r| r.holds()).unwrap_or(false) {
            bad += 1;
        }
    }
    CheckResult { name: "KL bound", pass: bad == 0, detail: format!("{bad} of 50 violated") }
}

fn quadratic_paths(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed, 3).rng();
    let (l, noise, _) = random_case(5, 3, &mut rng);
    let m = factor_posterior_moments(&l, &noise).unwrap();
    let ws = vec![std_normal_vec(3, &mut rng), std_normal_vec(3, &mut rng)];
    let mut coef = RegressionCoefficients::zeros(3);
    coef.omega = ws[0].clone();
    coef.big_omega = DMatrix::from_diagonal(&ws[1]);
    let d = induced_polynomial(&m, &ws).unwrap().max_abs_diff(&induced_coefficients(&m, &coef).unwrap());
    CheckResult { name: "order-2 polynomial path", pass: d < 1e-12, detail: format!("max diff {d:.2e}") }
}

fn ess_oracles(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed, 4).rng();
    let iid: Vec<f64> = (0..1000).map(|_| std_normal(&mut rng)).collect();
    let e_iid = ess(&iid).ess;
    let rho: f64 = 0.9;
    let mut ar = Vec::with_capacity(10_000);
    let mut v = std_normal(&mut rng) / (1.0 - rho * rho).sqrt();
    for _ in 0..10_000 {
        v = rho * v + std_normal(&mut rng);
        ar.push(v);
    }
    let e_ar = ess(&ar).ess;
    let target = 10_000.0 * (1.0 - rho) / (1.0 + rho);
    let flag = ess(&[1.0; 50]).degenerate;
    CheckResult {
        name: "ESS estimator",
        pass: (850.0..=1150.0).contains(&e_iid) && (e_ar / target - 1.0).abs() < 0.2 && flag,
        detail: format!("iid {e_iid:.0}, AR(1) {e_ar:.0} vs {target:.0}"),
    }
}

fn samplers(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed, 5).rng();
    let g: Vec<f64> = (0..50_000).map(|_| sample_gamma(2.0, 4.0, &mut rng).unwrap()).collect();
    let a: Vec<f64> = (0..5_000).map(|_| sample_gig(-0.5, 0.5, 2.0, &mut rng).unwrap()).collect();
    let b: Vec<f64> = (0..5_000).map(|_| sample_inverse_gaussian(2.0, 2.0, &mut rng).unwrap()).collect();
    let ks = ks_two_sample(&a, &b);
    let mg = mean(&g);
    CheckResult {
        name: "random variates",
        pass: (mg - 0.5).abs() < 0.01 && ks.p_value > 0.001,
        detail: format!("gamma mean {mg:.4}, GIG vs inverse Gaussian p = {:.3}", ks.p_value),
    }
}

fn chain(seed: u64) -> CheckResult {
    let spec = ScenarioSpec { p: 4, n_train: 50, n_test: 2, k_true: Some(2), seed, ..Default::default() };
    let sim = match generate_scenario(&spec) {
        Ok(s) => s,
        Err(e) => return CheckResult { name: "sampler smoke run", pass: false, detail: e.to_string() },
    };
    let data = Dataset::fully_observed(sim.y_train, sim.x_train, None).unwrap();
    let mut hyper = Hyperparams { k: 2, n_iter: 200, n_burn: 100, seed, ..Hyperparams::default() };
    let run = |h: &Hyperparams| run_chain(&data, h);
    match (run(&hyper), {
        hyper.parallel = false;
        run(&hyper)
    }) {
        (Ok(a), Ok(b)) => {
            let inv = a.final_state.check_invariants(&data);
            let same = a.induced_draws == b.induced_draws;
            CheckResult {
                name: "sampler smoke run",
                pass: inv.is_ok() && same,
                detail: format!(
                    "acceptance {:.2}, parallel = serial: {same}, invariants: {}",
                    a.accept_rate_eta,
                    inv.map_or_else(|e| e.to_string(), |_| "ok".into())
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => CheckResult { name: "sampler smoke run", pass: false, detail: e.to_string() },
    }
}

/// Fast numeric self-checks of the library.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    vec![rotation(seed), kl(seed), quadratic_paths(seed), ess_oracles(seed), samplers(seed), chain(seed)]
}
