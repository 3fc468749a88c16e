use log::warn;
use nalgebra::{DMatrix, DVector};

use super::config::{Hyperparams, ResponseModel};
use super::data::Dataset;
use super::state::ModelState;
use super::steps::{
    dl_local_updates, factor_scale_moves, gibbs_alpha_delta, gibbs_big_omega, gibbs_lambda_rows, gibbs_omega, gibbs_psi,
    gibbs_sigma2, impute_missing_and_lod, log_likelihood, map_units, mala_update_eta, response_mean,
};
use crate::distributions::{sample_mvn, std_normal};
use crate::error::{FinError, Result};
use crate::model::{factor_posterior_moments, induced_coefficients, induced_polynomial, InducedCoefficients};
use crate::rng::{Block, SweepStreams};
use crate::stats::{ess, EssEstimate};

/// Settings that change from sweep to sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext {
    pub iteration: usize,
    pub step: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepStats {
    pub accept_rate: f64,
}

fn ensure_finite(ok: bool, iteration: usize, block: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FinError::NonFinite { iteration, block })
    }
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

/// One full sweep: factors (MALA), `omega`, `Omega`, covariate effects,
/// `sigma^2`, loadings, Dirichlet-Laplace scales, `Psi`, imputation.
pub fn sweep(state: &mut ModelState, data: &Dataset, hyper: &Hyperparams, ctx: SweepContext) -> Result<SweepStats> {
    let it = ctx.iteration;
    let streams = SweepStreams::new(hyper.seed, it as u64);

    let accepted = mala_update_eta(state, data, ctx.step, hyper.mala_precondition, hyper.parallel, &streams)?;
    ensure_finite(all_finite(state.eta.iter()), it, "eta")?;

    gibbs_omega(state, data, hyper, &streams)?;
    ensure_finite(all_finite(state.coef.omega.iter()), it, "omega")?;

    gibbs_big_omega(state, data, hyper, &streams)?;
    ensure_finite(all_finite(state.coef.big_omega.iter()), it, "Omega")?;

    gibbs_alpha_delta(state, data, hyper, &streams)?;
    gibbs_sigma2(state, data, hyper, &streams)?;
    ensure_finite(state.noise.sigma2_y.is_finite(), it, "sigma2")?;

    gibbs_lambda_rows(state, hyper, &streams)?;
    ensure_finite(all_finite(state.loadings.lambda.iter()), it, "Lambda")?;

    dl_local_updates(state, hyper, &streams)?;
    ensure_finite(
        all_finite(state.phi.iter().chain(state.tau.iter()).chain(state.psi_local.iter())),
        it,
        "Dirichlet-Laplace scales",
    )?;

    gibbs_psi(state, hyper, &streams)?;
    ensure_finite(all_finite(state.noise.psi_diag.iter()), it, "Psi")?;

    impute_missing_and_lod(state, data, hyper.parallel, &streams)?;
    ensure_finite(all_finite(state.x_imputed.iter()), it, "imputation")?;

    if hyper.scale_moves {
        factor_scale_moves(state, hyper, &streams)?;
        ensure_finite(all_finite(state.eta.iter().chain(state.loadings.lambda.iter())), it, "factor scale")?;
    }

    ensure_finite(log_likelihood(state, data).is_finite(), it, "log-likelihood")?;
    if cfg!(debug_assertions) {
        state.check_invariants(data)?;
    }
    let n_acc = accepted.iter().filter(|&&a| a).count();
    Ok(SweepStats { accept_rate: n_acc as f64 / accepted.len().max(1) as f64 })
}

/// Induced regression at the current state.
pub fn induced_at(state: &ModelState, hyper: &Hyperparams) -> Result<InducedCoefficients> {
    let moments = factor_posterior_moments(&state.loadings, &state.noise)?;
    let mut out = match hyper.response {
        ResponseModel::Quadratic => induced_coefficients(&moments, &state.coef)?,
        ResponseModel::Polynomial { .. } => {
            let ws = state.coef.omega_higher.as_ref().expect("polynomial coefficients present");
            induced_polynomial(&moments, ws)?
        }
    };
    if let Some(d) = &state.coef.delta {
        out.covariate_int = Some(moments.a.transpose() * d);
    }
    Ok(out)
}

/// Robbins-Monro adaptation of `log(step)` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct StepAdapter {
    log_step: f64,
    target: f64,
    t: usize,
    sum_late: f64,
    n_late: usize,
    horizon: usize,
}

impl StepAdapter {
    pub fn new(initial: f64, target: f64, horizon: usize) -> Self {
        Self { log_step: initial.ln(), target, t: 0, sum_late: 0.0, n_late: 0, horizon }
    }

    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn update(&mut self, accept_rate: f64) {
        self.t += 1;
        let gain = 1.0 / (self.t as f64 + 5.0).powf(0.6);
        self.log_step = (self.log_step + 2.0 * gain * (accept_rate - self.target)).clamp(-30.0, 5.0);
        if self.t * 2 > self.horizon {
            self.sum_late += self.log_step;
            self.n_late += 1;
        }
    }

    /// Step size used after burn-in: the average of `log(step)` over the
    /// second half of adaptation.
    pub fn frozen(&self) -> f64 {
        if self.n_late == 0 {
            self.step()
        } else {
            (self.sum_late / self.n_late as f64).exp()
        }
    }
}

/// Out-of-sample units at which posterior predictive draws are recorded.
#[derive(Debug, Clone, Default)]
pub struct ChainOptions {
    pub x_test: Option<DMatrix<f64>>,
    pub z_test: Option<DMatrix<f64>>,
    /// Keep `Lambda` at every kept iteration (rotation ambiguous).
    pub record_lambda: bool,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub induced_draws: Vec<InducedCoefficients>,
    pub alpha_draws: Vec<DVector<f64>>,
    pub sigma2_draws: Vec<f64>,
    /// Post burn-in acceptance rate of the factor updates.
    pub accept_rate_eta: f64,
    pub step_size: f64,
    /// `n_test x n_kept` posterior predictive draws of `y`.
    pub predictive_draws: Option<DMatrix<f64>>,
    /// `n_test x n_kept` draws of `E[y | X, Z]`.
    pub predictive_mean_draws: Option<DMatrix<f64>>,
    /// One estimate per induced main effect.
    pub ess: Vec<EssEstimate>,
    /// `(row, column, posterior mean)` for every missing or below-LOD cell.
    pub imputed_means: Vec<(usize, usize, f64)>,
    pub lambda_draws: Option<Vec<DMatrix<f64>>>,
    pub final_state: ModelState,
}

impl ChainOutput {
    pub fn n_kept(&self) -> usize {
        self.induced_draws.len()
    }

    /// Draws of the induced main effect of exposure `j`.
    pub fn main_effect_draws(&self, j: usize) -> Vec<f64> {
        self.induced_draws.iter().map(|d| d.beta_x[j]).collect()
    }

    /// Posterior mean of `E[y | X, Z]` at each test unit.
    pub fn predictive_mean(&self) -> Option<DVector<f64>> {
        self.predictive_mean_draws.as_ref().map(|m| m.column_mean())
    }
}

fn predictive_column(
    state: &ModelState,
    hyper: &Hyperparams,
    x_test: &DMatrix<f64>,
    z_test: Option<&DMatrix<f64>>,
    induced: &InducedCoefficients,
    iteration: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let moments = factor_posterior_moments(&state.loadings, &state.noise)?;
    let streams = SweepStreams::new(hyper.seed, iteration as u64);
    let sigma = state.noise.sigma2_y.sqrt();
    let rows = map_units(x_test.nrows(), hyper.parallel, |i| -> Result<(f64, f64)> {
        let mut rng = streams.rng(Block::Predict, i);
        let x = x_test.row(i).transpose();
        let z = z_test.map(|z| z.row(i).transpose());
        let mean = &moments.a * &x;
        let eta = sample_mvn(&mean, &moments.v, &mut rng)?;
        let y = response_mean(&state.coef, &eta, z.as_ref()) + sigma * std_normal(&mut rng);
        let mut m = induced.predict_mean(&x, z.as_ref());
        if let (Some(a), Some(z)) = (&state.coef.alpha, &z) {
            m += a.dot(z);
        }
        Ok((y, m))
    });
    let mut draw = DVector::zeros(x_test.nrows());
    let mut mean = DVector::zeros(x_test.nrows());
    for (i, r) in rows.into_iter().enumerate() {
        let (y, m) = r?;
        draw[i] = y;
        mean[i] = m;
    }
    Ok((draw, mean))
}

pub fn run_chain(data: &Dataset, hyper: &Hyperparams) -> Result<ChainOutput> {
    run_chain_with(data, hyper, &ChainOptions::default())
}

/// Runs `hyper.n_iter` sweeps from [`ModelState::initialize`], adapting the
/// MALA step during burn-in only and recording the induced regression at
/// every kept iteration.
pub fn run_chain_with(data: &Dataset, hyper: &Hyperparams, opts: &ChainOptions) -> Result<ChainOutput> {
    hyper.validate()?;
    if hyper.k > data.p() {
        warn!("k = {} exceeds the number of exposures p = {}", hyper.k, data.p());
    }
    if let Some(x) = &opts.x_test {
        if x.ncols() != data.p() {
            return Err(FinError::InvalidArgument(format!(
                "test matrix has {} columns but p = {}",
                x.ncols(),
                data.p()
            )));
        }
    }
    let mut state = ModelState::initialize(data, hyper)?;
    {
        let streams = SweepStreams::new(hyper.seed, u64::from(u32::MAX));
        dl_local_updates(&mut state, hyper, &streams)?;
    }
    let mut adapter = StepAdapter::new(hyper.mala_step, hyper.mala_target_accept, hyper.n_burn);
    let mut step = hyper.mala_step;
    let n_kept = hyper.n_kept();
    let mut induced_draws = Vec::with_capacity(n_kept);
    let mut alpha_draws = Vec::new();
    let mut sigma2_draws = Vec::with_capacity(n_kept);
    let mut lambda_draws = opts.record_lambda.then(Vec::new);
    let n_test = opts.x_test.as_ref().map_or(0, |x| x.nrows());
    let mut pred = opts.x_test.as_ref().map(|_| DMatrix::zeros(n_test, n_kept));
    let mut pred_mean = opts.x_test.as_ref().map(|_| DMatrix::zeros(n_test, n_kept));
    let incomplete = data.incomplete_cells();
    let mut imputed_sum = vec![0.0; incomplete.len()];
    let mut accept_sum = 0.0;

    for it in 0..hyper.n_iter {
        let stats = sweep(&mut state, data, hyper, SweepContext { iteration: it, step })?;
        if it < hyper.n_burn {
            if hyper.adapt_step {
                adapter.update(stats.accept_rate);
                step = if it + 1 == hyper.n_burn { adapter.frozen() } else { adapter.step() };
            }
            continue;
        }
        accept_sum += stats.accept_rate;
        let induced = induced_at(&state, hyper)?;
        if let (Some(x), Some(p), Some(pm)) = (&opts.x_test, pred.as_mut(), pred_mean.as_mut()) {
            let (draw, mean) = predictive_column(&state, hyper, x, opts.z_test.as_ref(), &induced, it)?;
            let c = it - hyper.n_burn;
            p.set_column(c, &draw);
            pm.set_column(c, &mean);
        }
        induced_draws.push(induced);
        if let Some(a) = &state.coef.alpha {
            alpha_draws.push(a.clone());
        }
        sigma2_draws.push(state.noise.sigma2_y);
        if let Some(l) = lambda_draws.as_mut() {
            l.push(state.loadings.lambda.clone());
        }
        for (s, &(i, j)) in imputed_sum.iter_mut().zip(&incomplete) {
            *s += state.x_imputed[(i, j)];
        }
    }

    let p = data.p();
    let ess_est = (0..p)
        .map(|j| ess(&induced_draws.iter().map(|d| d.beta_x[j]).collect::<Vec<_>>()))
        .collect();
    let imputed_means = incomplete
        .iter()
        .zip(&imputed_sum)
        .map(|(&(i, j), s)| (i, j, s / n_kept as f64))
        .collect();
    Ok(ChainOutput {
        induced_draws,
        alpha_draws,
        sigma2_draws,
        accept_rate_eta: accept_sum / n_kept as f64,
        step_size: step,
        predictive_draws: pred,
        predictive_mean_draws: pred_mean,
        ess: ess_est,
        imputed_means,
        lambda_draws,
        final_state: state,
    })
}
