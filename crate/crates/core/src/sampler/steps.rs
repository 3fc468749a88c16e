//! One conditional update per function. Each takes the stream factory of the
//! current sweep and draws from `(block, unit)` streams only, so serial and
//! parallel execution give identical results.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;

use super::config::{DlPsiUpdate, Hyperparams, ResponseModel};
use super::data::{CellStatus, Dataset};
use super::state::{sync_polynomial, ModelState};
use crate::distributions::{
    sample_gamma, sample_gig, sample_inverse_gaussian, sample_mvn_precision, sample_truncated_normal,
    std_normal, std_normal_vec,
};
use crate::error::{FinError, Result};
use crate::model::RegressionCoefficients;
use crate::rng::{Block, SweepStreams};

/// Floor on GIG `b` arguments when a loading is exactly zero.
pub const GIG_B_FLOOR: f64 = 1e-12;
/// Floor on `|lambda_jh|` in the local-scale conditional.
const LAMBDA_ABS_FLOOR: f64 = 1e-12;
/// Bounds on the prior variance `tau^2 psi phi^2` of a loading.
const PRIOR_VAR_FLOOR: f64 = 1e-12;
const PRIOR_VAR_CEIL: f64 = 1e12;

pub(crate) fn map_units<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn z_row(data: &Dataset, i: usize) -> Option<DVector<f64>> {
    data.z.as_ref().map(|z| z.row(i).transpose())
}

/// Latent part of `E[y_i | eta_i]`, without covariate terms.
pub fn latent_mean(coef: &RegressionCoefficients, eta: &DVector<f64>) -> f64 {
    match &coef.omega_higher {
        Some(ws) => ws
            .iter()
            .enumerate()
            .map(|(qi, w)| w.iter().zip(eta.iter()).map(|(c, e)| c * e.powi(qi as i32 + 1)).sum::<f64>())
            .sum(),
        None => coef.omega.dot(eta) + eta.dot(&(&coef.big_omega * eta)),
    }
}

fn latent_mean_grad(coef: &RegressionCoefficients, eta: &DVector<f64>) -> DVector<f64> {
    match &coef.omega_higher {
        Some(ws) => DVector::from_fn(eta.len(), |h, _| {
            ws.iter()
                .enumerate()
                .map(|(qi, w)| (qi + 1) as f64 * w[h] * eta[h].powi(qi as i32))
                .sum()
        }),
        None => &coef.omega + 2.0 * (&coef.big_omega * eta),
    }
}

/// Full `E[y_i | eta_i, Z_i]`.
pub fn response_mean(coef: &RegressionCoefficients, eta: &DVector<f64>, z: Option<&DVector<f64>>) -> f64 {
    let mut m = latent_mean(coef, eta);
    if let Some(z) = z {
        if let Some(a) = &coef.alpha {
            m += a.dot(z);
        }
        if let Some(d) = &coef.delta {
            m += eta.dot(&(d * z));
        }
    }
    m
}

fn response_mean_grad(coef: &RegressionCoefficients, eta: &DVector<f64>, z: Option<&DVector<f64>>) -> DVector<f64> {
    let mut g = latent_mean_grad(coef, eta);
    if let (Some(z), Some(d)) = (z, &coef.delta) {
        g += d * z;
    }
    g
}

/// Quantities shared by every row in one factor update.
struct EtaContext {
    /// `Lambda^T Psi^{-1}`, `k x p`
    lt_pinv: DMatrix<f64>,
    /// `Lambda^T Psi^{-1} Lambda`
    gram: DMatrix<f64>,
}

impl EtaContext {
    fn new(state: &ModelState) -> Self {
        let mut lt_pinv = state.loadings.lambda.transpose();
        for (j, mut col) in lt_pinv.column_iter_mut().enumerate() {
            col /= state.noise.psi_diag[j];
        }
        let gram = &lt_pinv * &state.loadings.lambda;
        Self { lt_pinv, gram }
    }

    /// Log full conditional of `eta_i` up to a constant, and its gradient.
    fn log_density_grad(
        &self,
        state: &ModelState,
        eta: &DVector<f64>,
        x_row: &DVector<f64>,
        y: f64,
        z: Option<&DVector<f64>>,
    ) -> (f64, DVector<f64>) {
        let lin = &self.lt_pinv * x_row;
        let g_eta = &self.gram * eta;
        let resid = y - response_mean(&state.coef, eta, z);
        let s2 = state.noise.sigma2_y;
        let logd = -0.5 * eta.norm_squared() - 0.5 * eta.dot(&g_eta) + eta.dot(&lin) - 0.5 * resid * resid / s2;
        let grad = -eta - g_eta + lin + response_mean_grad(&state.coef, eta, z) * (resid / s2);
        (logd, grad)
    }
}

/// Log full conditional of row `i` of `eta` (up to a constant) and its exact
/// gradient, evaluated at the current state.
pub fn eta_log_density_and_grad(state: &ModelState, data: &Dataset, i: usize) -> (f64, DVector<f64>) {
    let ctx = EtaContext::new(state);
    let eta = state.eta.row(i).transpose();
    let x_row = state.x_imputed.row(i).transpose();
    let z = z_row(data, i);
    ctx.log_density_grad(state, &eta, &x_row, data.y[i], z.as_ref())
}

/// Preconditioner for the Langevin proposals: `M = P^{-1}` with
/// `P = Lambda^T Psi^{-1} Lambda + I + omega omega^T / sigma^2`.
pub struct Preconditioner {
    chol: Cholesky<f64, Dyn>,
}

impl Preconditioner {
    pub fn from_state(state: &ModelState) -> Result<Self> {
        let ctx = EtaContext::new(state);
        let mut prec = ctx.gram;
        prec += &state.coef.omega * state.coef.omega.transpose() / state.noise.sigma2_y;
        for h in 0..state.k() {
            prec[(h, h)] += 1.0;
        }
        let chol = prec
            .cholesky()
            .ok_or(FinError::NotPositiveDefinite { context: "MALA preconditioner" })?;
        Ok(Self { chol })
    }

    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(g)
    }

    /// `d^T M^{-1} d`
    fn inv_quad(&self, d: &DVector<f64>) -> f64 {
        (self.chol.l().transpose() * d).norm_squared()
    }

    /// A draw from `N(0, M)`.
    fn noise<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let z = std_normal_vec(k, rng);
        self.chol.l().transpose().solve_upper_triangular(&z).expect("positive diagonal")
    }
}

/// One MALA move per row of `eta` with proposal
/// `N(eta + step/2 * M grad, step * M)` (`M = I` without preconditioning).
/// Returns the per-row acceptance flags.
pub fn mala_update_eta(
    state: &mut ModelState,
    data: &Dataset,
    step: f64,
    precondition: bool,
    parallel: bool,
    streams: &SweepStreams,
) -> Result<Vec<bool>> {
    let ctx = EtaContext::new(state);
    let pre = if precondition { Some(Preconditioner::from_state(state)?) } else { None };
    let k = state.k();
    let sqrt_step = step.sqrt();
    let st: &ModelState = state;
    let results = map_units(data.n(), parallel, |i| {
        let mut rng = streams.rng(Block::Eta, i);
        let eta = st.eta.row(i).transpose();
        let x_row = st.x_imputed.row(i).transpose();
        let z = z_row(data, i);
        let y = data.y[i];
        let (lp0, g0) = ctx.log_density_grad(st, &eta, &x_row, y, z.as_ref());
        let drift = |g: &DVector<f64>| match &pre {
            Some(m) => m.apply(g) * (0.5 * step),
            None => g * (0.5 * step),
        };
        let noise = match &pre {
            Some(m) => m.noise(k, &mut rng),
            None => std_normal_vec(k, &mut rng),
        };
        let prop = &eta + drift(&g0) + noise * sqrt_step;
        let (lp1, g1) = ctx.log_density_grad(st, &prop, &x_row, y, z.as_ref());
        let quad = |d: DVector<f64>| match &pre {
            Some(m) => m.inv_quad(&d),
            None => d.norm_squared(),
        };
        let fwd = -quad(&prop - &eta - drift(&g0)) / (2.0 * step);
        let bwd = -quad(&eta - &prop - drift(&g1)) / (2.0 * step);
        let log_ratio = lp1 - lp0 + bwd - fwd;
        let u: f64 = rng.random();
        if log_ratio.is_finite() && u.ln() < log_ratio {
            (prop, true)
        } else {
            (eta, false)
        }
    });
    let mut accepted = Vec::with_capacity(results.len());
    for (i, (row, acc)) in results.into_iter().enumerate() {
        state.eta.set_row(i, &row.transpose());
        accepted.push(acc);
    }
    Ok(accepted)
}

/// Conjugate normal draw of regression coefficients with prior
/// `N(0, prior_var I)` and noise variance `sigma2`.
fn conjugate_regression<R: Rng + ?Sized>(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    sigma2: f64,
    prior_var: f64,
    context: &'static str,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut prec = design.tr_mul(design) / sigma2;
    for d in 0..prec.nrows() {
        prec[(d, d)] += 1.0 / prior_var;
    }
    let b = design.tr_mul(response) / sigma2;
    sample_mvn_precision(prec, &b, context, rng)
}

/// Part of `E[y | eta, Z]` from the covariates: `Z alpha + diag(eta Delta Z^T)`.
fn covariate_part(state: &ModelState, data: &Dataset) -> DVector<f64> {
    let n = data.n();
    match &data.z {
        None => DVector::zeros(n),
        Some(z) => DVector::from_fn(n, |i, _| {
            let zi = z.row(i).transpose();
            let eta = state.eta.row(i).transpose();
            let mut v = state.coef.alpha.as_ref().map_or(0.0, |a| a.dot(&zi));
            if let Some(d) = &state.coef.delta {
                v += eta.dot(&(d * &zi));
            }
            v
        }),
    }
}

fn quadratic_part(state: &ModelState) -> DVector<f64> {
    let n = state.n();
    DVector::from_fn(n, |i, _| {
        let e = state.eta.row(i).transpose();
        e.dot(&(&state.coef.big_omega * &e))
    })
}

/// Main-effect coefficients `omega` given everything else. Under the
/// polynomial response every `omega^(q)` is drawn jointly.
pub fn gibbs_omega(state: &mut ModelState, data: &Dataset, hyper: &Hyperparams, streams: &SweepStreams) -> Result<()> {
    let mut rng = streams.rng(Block::Omega, 0);
    let (n, k) = (state.n(), state.k());
    let s2 = state.noise.sigma2_y;
    let cov = covariate_part(state, data);
    match hyper.response {
        ResponseModel::Quadratic => {
            let resp = &data.y - quadratic_part(state) - cov;
            state.coef.omega =
                conjugate_regression(&state.eta, &resp, s2, hyper.prior_var_coef, "omega", &mut rng)?;
        }
        ResponseModel::Polynomial { order } => {
            let design = DMatrix::from_fn(n, k * order, |i, c| state.eta[(i, c % k)].powi((c / k) as i32 + 1));
            let resp = &data.y - cov;
            let w = conjugate_regression(&design, &resp, s2, hyper.prior_var_coef, "omega^(q)", &mut rng)?;
            state.coef.omega_higher = Some((0..order).map(|q| w.rows(q * k, k).into_owned()).collect());
            sync_polynomial(&mut state.coef);
        }
    }
    Ok(())
}

/// Upper triangle of `Omega` as the coefficients of `eta_h eta_l` (`h <= l`);
/// off-diagonal coefficients are split evenly between `(h, l)` and `(l, h)`.
/// A no-op under the polynomial response.
pub fn gibbs_big_omega(
    state: &mut ModelState,
    data: &Dataset,
    hyper: &Hyperparams,
    streams: &SweepStreams,
) -> Result<()> {
    if hyper.response != ResponseModel::Quadratic {
        return Ok(());
    }
    let mut rng = streams.rng(Block::BigOmega, 0);
    let (n, k) = (state.n(), state.k());
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|h| (h..k).map(move |l| (h, l))).collect();
    let design = DMatrix::from_fn(n, pairs.len(), |i, c| {
        let (h, l) = pairs[c];
        state.eta[(i, h)] * state.eta[(i, l)]
    });
    let resp = &data.y - &state.eta * &state.coef.omega - covariate_part(state, data);
    let c = conjugate_regression(
        &design,
        &resp,
        state.noise.sigma2_y,
        hyper.prior_var_coef,
        "Omega",
        &mut rng,
    )?;
    let mut om = DMatrix::zeros(k, k);
    for (idx, &(h, l)) in pairs.iter().enumerate() {
        if h == l {
            om[(h, h)] = c[idx];
        } else {
            om[(h, l)] = 0.5 * c[idx];
            om[(l, h)] = 0.5 * c[idx];
        }
    }
    state.coef.big_omega = om;
    Ok(())
}

/// Joint draw of covariate main effects `alpha` and factor-by-covariate
/// interactions `Delta` (stacked row-major as `Delta[h, l]`). Skipped
/// without covariates.
pub fn gibbs_alpha_delta(
    state: &mut ModelState,
    data: &Dataset,
    hyper: &Hyperparams,
    streams: &SweepStreams,
) -> Result<()> {
    let Some(z) = &data.z else { return Ok(()) };
    let mut rng = streams.rng(Block::AlphaDelta, 0);
    let (n, k, q) = (state.n(), state.k(), data.q());
    let design = DMatrix::from_fn(n, q + k * q, |i, c| {
        if c < q {
            z[(i, c)]
        } else {
            let (h, l) = ((c - q) / q, (c - q) % q);
            state.eta[(i, h)] * z[(i, l)]
        }
    });
    let latent = DVector::from_fn(n, |i, _| latent_mean(&state.coef, &state.eta.row(i).transpose()));
    let resp = &data.y - latent;
    let w = conjugate_regression(
        &design,
        &resp,
        state.noise.sigma2_y,
        hyper.prior_var_coef,
        "alpha/Delta update",
        &mut rng,
    )?;
    state.coef.alpha = Some(w.rows(0, q).into_owned());
    state.coef.delta = Some(DMatrix::from_fn(k, q, |h, l| w[q + h * q + l]));
    Ok(())
}

/// Residuals `y_i - E[y_i | eta_i, Z_i]` at the current state.
pub fn response_residuals(state: &ModelState, data: &Dataset) -> DVector<f64> {
    DVector::from_fn(data.n(), |i, _| {
        let z = z_row(data, i);
        data.y[i] - response_mean(&state.coef, &state.eta.row(i).transpose(), z.as_ref())
    })
}

/// Response noise variance from its inverse-gamma conditional.
pub fn gibbs_sigma2(state: &mut ModelState, data: &Dataset, hyper: &Hyperparams, streams: &SweepStreams) -> Result<()> {
    let mut rng = streams.rng(Block::Sigma2, 0);
    let ssr = response_residuals(state, data).norm_squared();
    let shape = hyper.inv_gamma_shape + 0.5 * data.n() as f64;
    let rate = hyper.inv_gamma_rate + 0.5 * ssr;
    state.noise.sigma2_y = 1.0 / sample_gamma(shape, rate, &mut rng)?;
    Ok(())
}

/// Rows of `Lambda`, independently given `eta`, `Psi` and the local scales.
/// Masked entries stay at zero; only free columns are drawn.
pub fn gibbs_lambda_rows(state: &mut ModelState, hyper: &Hyperparams, streams: &SweepStreams) -> Result<()> {
    let st: &ModelState = state;
    let rows = map_units(st.p(), hyper.parallel, |j| -> Result<DVector<f64>> {
        let mut rng = streams.rng(Block::Lambda, j);
        let free = st.loadings.free_columns(j);
        let mut row = DVector::zeros(st.k());
        if free.is_empty() {
            return Ok(row);
        }
        let eta_f = st.eta.select_columns(free.iter());
        let s2 = st.noise.psi_diag[j];
        let mut prec = eta_f.tr_mul(&eta_f) / s2;
        for (idx, &h) in free.iter().enumerate() {
            let d = (st.tau[j].powi(2) * st.psi_local[(j, h)] * st.phi[(j, h)].powi(2))
                .clamp(PRIOR_VAR_FLOOR, PRIOR_VAR_CEIL);
            prec[(idx, idx)] += 1.0 / d;
        }
        let b = eta_f.tr_mul(&st.x_imputed.column(j)) / s2;
        let draw = sample_mvn_precision(prec, &b, "Lambda rows", &mut rng)?;
        for (idx, &h) in free.iter().enumerate() {
            row[h] = draw[idx];
        }
        Ok(row)
    });
    for (j, r) in rows.into_iter().enumerate() {
        state.loadings.lambda.set_row(j, &r?.transpose());
    }
    Ok(())
}

/// Dirichlet-Laplace scales for every row of `Lambda`, drawn as one block:
/// `phi_j | lambda_j` through normalized GIG variables, then
/// `tau_j | phi_j, lambda_j`, then `psi_jh | tau_j, phi_jh, lambda_jh`.
pub fn dl_local_updates(state: &mut ModelState, hyper: &Hyperparams, streams: &SweepStreams) -> Result<()> {
    let a = hyper.dl_a;
    let k = state.k();
    let st: &ModelState = state;
    type Row = (DVector<f64>, f64, DVector<f64>);
    let rows = map_units(st.p(), hyper.parallel, |j| -> Result<Row> {
        let free = st.loadings.free_columns(j);
        let mut phi = DVector::zeros(k);
        let mut psi = DVector::from_element(k, 1.0);
        if free.is_empty() {
            let mut rng = streams.rng(Block::DlTau, j);
            return Ok((phi, sample_gamma(k as f64 * a, 0.5, &mut rng)?, psi));
        }
        let abs: Vec<f64> = free.iter().map(|&h| st.loadings.lambda[(j, h)].abs()).collect();

        let mut rng = streams.rng(Block::DlPhi, j);
        let t: Vec<f64> = abs
            .iter()
            .map(|&l| sample_gig(a - 1.0, 1.0, (2.0 * l).max(GIG_B_FLOOR), &mut rng))
            .collect::<Result<_>>()?;
        let total: f64 = t.iter().sum();
        for (idx, &h) in free.iter().enumerate() {
            phi[h] = t[idx] / total;
        }
        // renormalize so the row sums to one to rounding
        let s: f64 = free.iter().map(|&h| phi[h]).sum();
        for &h in &free {
            phi[h] = (phi[h] / s).max(f64::MIN_POSITIVE);
        }

        let mut rng = streams.rng(Block::DlTau, j);
        let kf = free.len() as f64;
        let b_tau: f64 = free.iter().zip(&abs).map(|(&h, &l)| 2.0 * l / phi[h]).sum();
        let tau = sample_gig(kf * a - kf, 1.0, b_tau.max(GIG_B_FLOOR), &mut rng)?;

        let mut rng = streams.rng(Block::DlPsi, j);
        for (&h, &l) in free.iter().zip(&abs) {
            psi[h] = match hyper.dl_psi {
                DlPsiUpdate::Exact => {
                    let mu = tau * phi[h] / l.max(LAMBDA_ABS_FLOOR);
                    1.0 / sample_inverse_gaussian(mu, 1.0, &mut rng)?
                }
                DlPsiUpdate::Literal => sample_inverse_gaussian(tau * phi[h], 1.0, &mut rng)?,
            };
        }
        Ok((phi, tau, psi))
    });
    for (j, r) in rows.into_iter().enumerate() {
        let (phi, tau, psi) = r?;
        state.phi.set_row(j, &phi.transpose());
        state.tau[j] = tau;
        state.psi_local.set_row(j, &psi.transpose());
    }
    Ok(())
}

/// Idiosyncratic variances `sigma_j^2` from their inverse-gamma conditionals.
pub fn gibbs_psi(state: &mut ModelState, hyper: &Hyperparams, streams: &SweepStreams) -> Result<()> {
    let n = state.n();
    let fitted = &state.eta * state.loadings.lambda.transpose();
    for j in 0..state.p() {
        let mut rng = streams.rng(Block::Psi, j);
        let ssr = (state.x_imputed.column(j) - fitted.column(j)).norm_squared();
        let shape = hyper.inv_gamma_shape + 0.5 * n as f64;
        let rate = hyper.inv_gamma_rate + 0.5 * ssr;
        state.noise.psi_diag[j] = 1.0 / sample_gamma(shape, rate, &mut rng)?;
    }
    Ok(())
}

/// Redraws missing cells from `N(lambda_j^T eta_i, sigma_j^2)` and below-LOD
/// cells from the same normal truncated above at the column's limit.
pub fn impute_missing_and_lod(state: &mut ModelState, data: &Dataset, parallel: bool, streams: &SweepStreams) -> Result<()> {
    if data.is_complete() {
        return Ok(());
    }
    let st: &ModelState = state;
    let rows = map_units(data.n(), parallel, |i| -> Result<Vec<(usize, f64)>> {
        let cols: Vec<usize> = (0..data.p()).filter(|&j| data.status[(i, j)] != CellStatus::Observed).collect();
        if cols.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = streams.rng(Block::Impute, i);
        let eta = st.eta.row(i);
        cols.into_iter()
            .map(|j| {
                let mean = st.loadings.lambda.row(j).dot(&eta);
                let var = st.noise.psi_diag[j];
                let v = match data.status[(i, j)] {
                    CellStatus::Missing => mean + var.sqrt() * std_normal(&mut rng),
                    CellStatus::BelowLod => {
                        let lod = data.lod[j].expect("validated at construction");
                        sample_truncated_normal(mean, var, f64::NEG_INFINITY, lod, &mut rng)?
                    }
                    CellStatus::Observed => unreachable!(),
                };
                Ok((j, v))
            })
            .collect()
    });
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r? {
            state.x_imputed[(i, j)] = v;
        }
    }
    Ok(())
}

/// Metropolis attempts per factor in [`factor_scale_moves`].
const SCALE_TRIES: usize = 3;

/// Coefficients of factor `h` with the power of `c` each picks up when the
/// factor is rescaled by `1 / c`.
fn scaled_coefficients(coef: &RegressionCoefficients, h: usize) -> Vec<(f64, i32)> {
    let mut out = Vec::new();
    match &coef.omega_higher {
        Some(ws) => out.extend(ws.iter().enumerate().map(|(qi, w)| (w[h], qi as i32 + 1))),
        None => {
            out.push((coef.omega[h], 1));
            for l in 0..coef.omega.len() {
                if l == h {
                    out.push((coef.big_omega[(h, h)], 2));
                } else {
                    out.push((2.0 * coef.big_omega[(h, l)], 1));
                }
            }
        }
    }
    if let Some(d) = &coef.delta {
        out.extend(d.row(h).iter().map(|&v| (v, 1)));
    }
    out
}

/// Log posterior of the map `eta_h -> eta_h / c`, `lambda_h -> c lambda_h`,
/// coefficients `-> c^r` at `u = log c`, relative to `u = 0`, Jacobian
/// included. The likelihood does not change under the map.
fn scale_log_ratio(
    u: f64,
    n: usize,
    eta_ss: f64,
    loading_ss: f64,
    m: usize,
    coefs: &[(f64, i32)],
    prior_var: f64,
) -> f64 {
    let mut l = -0.5 * eta_ss * ((-2.0 * u).exp() - 1.0) - n as f64 * u;
    l += -0.5 * loading_ss * ((2.0 * u).exp() - 1.0) + m as f64 * u;
    for &(v, r) in coefs {
        let r = r as f64;
        l += -0.5 * v * v / prior_var * ((2.0 * r * u).exp() - 1.0) + r * u;
    }
    l
}

/// Rescales each factor together with its loadings and regression
/// coefficients so that `Lambda eta` and `E[y | eta]` are unchanged, with a
/// random-walk Metropolis step on the log scale. Returns the acceptance
/// rate over all attempts.
pub fn factor_scale_moves(state: &mut ModelState, hyper: &Hyperparams, streams: &SweepStreams) -> Result<f64> {
    let (n, k) = (state.n(), state.k());
    let sd = 1.0 / (n as f64).sqrt();
    let mut accepted = 0usize;
    for h in 0..k {
        let mut rng = streams.rng(Block::FactorScale, h);
        let free: Vec<usize> = (0..state.p()).filter(|&j| !state.loadings.is_masked(j, h)).collect();
        let loading_ss: f64 = free
            .iter()
            .map(|&j| {
                let d = (state.tau[j].powi(2) * state.psi_local[(j, h)] * state.phi[(j, h)].powi(2))
                    .clamp(PRIOR_VAR_FLOOR, PRIOR_VAR_CEIL);
                state.loadings.lambda[(j, h)].powi(2) / d
            })
            .sum();
        let eta_ss = state.eta.column(h).norm_squared();
        let coefs = scaled_coefficients(&state.coef, h);
        let mut u = 0.0;
        let mut cur = 0.0;
        for _ in 0..SCALE_TRIES {
            let prop = u + sd * std_normal(&mut rng);
            let lp = scale_log_ratio(prop, n, eta_ss, loading_ss, free.len(), &coefs, hyper.prior_var_coef);
            let draw: f64 = rng.random();
            if lp.is_finite() && draw.ln() < lp - cur {
                u = prop;
                cur = lp;
                accepted += 1;
            }
        }
        if u != 0.0 {
            apply_factor_scale(state, h, u.exp());
        }
    }
    Ok(accepted as f64 / (k * SCALE_TRIES) as f64)
}

fn apply_factor_scale(state: &mut ModelState, h: usize, c: f64) {
    state.loadings.lambda.column_mut(h).scale_mut(c);
    state.eta.column_mut(h).scale_mut(1.0 / c);
    let coef = &mut state.coef;
    match &mut coef.omega_higher {
        Some(ws) => {
            for (qi, w) in ws.iter_mut().enumerate() {
                w[h] *= c.powi(qi as i32 + 1);
            }
            sync_polynomial(coef);
        }
        None => {
            coef.omega[h] *= c;
            coef.big_omega.row_mut(h).scale_mut(c);
            coef.big_omega.column_mut(h).scale_mut(c);
        }
    }
    if let Some(d) = &mut coef.delta {
        d.row_mut(h).scale_mut(c);
    }
}

/// Joint log-likelihood of `(y, X_imputed)` given `eta` and the parameters.
pub fn log_likelihood(state: &ModelState, data: &Dataset) -> f64 {
    let n = data.n() as f64;
    let r = response_residuals(state, data);
    let s2 = state.noise.sigma2_y;
    let mut ll = -0.5 * (n * (2.0 * std::f64::consts::PI * s2).ln() + r.norm_squared() / s2);
    let fitted = &state.eta * state.loadings.lambda.transpose();
    for j in 0..state.p() {
        let v = state.noise.psi_diag[j];
        let ssr = (state.x_imputed.column(j) - fitted.column(j)).norm_squared();
        ll -= 0.5 * (n * (2.0 * std::f64::consts::PI * v).ln() + ssr / v);
    }
    ll
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        RngStream { seed, stream_id: 0 }.rng()
    }

    fn random_setup(n: usize, p: usize, q: usize, k: usize, seed: u64) -> (ModelState, Dataset, Hyperparams) {
        let hyper = Hyperparams { k, inv_gamma_shape: 3.0, inv_gamma_rate: 2.0, prior_var_coef: 1.0, ..Default::default() };
        let mut r = rng(seed);
        let mut state = ModelState::sample_prior(n, p, q, &hyper, &mut r).unwrap();
        let x = DMatrix::from_fn(n, p, |_, _| std_normal(&mut r));
        let y = DVector::from_fn(n, |_, _| std_normal(&mut r));
        let z = (q > 0).then(|| DMatrix::from_fn(n, q, |_, _| std_normal(&mut r)));
        state.x_imputed = x.clone();
        let data = Dataset::fully_observed(y, x, z).unwrap();
        (state, data, hyper)
    }

    #[test]
    fn zero_model_gives_standard_normal_conditional() {
        let (mut st, data, _) = random_setup(5, 3, 0, 2, 1);
        st.loadings.lambda.fill(0.0);
        st.coef = RegressionCoefficients::zeros(2);
        let (_, g) = eta_log_density_and_grad(&st, &data, 2);
        let eta = st.eta.row(2).transpose();
        assert!((g + &eta).amax() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, q) in [(3, 0), (4, 2)] {
            let (mut st, data, _) = random_setup(6, 5, q, 3, seed);
            let i = 1;
            let (_, g) = eta_log_density_and_grad(&st, &data, i);
            let h = 1e-5;
            for c in 0..3 {
                let e0 = st.eta[(i, c)];
                st.eta[(i, c)] = e0 + h;
                let (up, _) = eta_log_density_and_grad(&st, &data, i);
                st.eta[(i, c)] = e0 - h;
                let (dn, _) = eta_log_density_and_grad(&st, &data, i);
                st.eta[(i, c)] = e0;
                let fd = (up - dn) / (2.0 * h);
                assert!((fd - g[c]).abs() <= 1e-6 * g[c].abs().max(1.0), "{fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn gradient_at_origin() {
        let (mut st, data, _) = random_setup(4, 5, 0, 3, 5);
        st.eta.fill(0.0);
        let i = 0;
        let (_, g) = eta_log_density_and_grad(&st, &data, i);
        let psi_inv = DMatrix::from_diagonal(&st.noise.psi_diag.map(|v| 1.0 / v));
        let expected = st.loadings.lambda.transpose() * psi_inv * st.x_imputed.row(i).transpose()
            + &st.coef.omega * (data.y[i] / st.noise.sigma2_y);
        assert!((g - expected).amax() < 1e-12);
    }

    #[test]
    fn tiny_step_always_accepts_and_barely_moves() {
        let (mut st, data, _) = random_setup(40, 4, 0, 2, 6);
        let before = st.eta.clone();
        let streams = SweepStreams::new(9, 0);
        let acc = mala_update_eta(&mut st, &data, 1e-10, false, true, &streams).unwrap();
        assert!(acc.iter().all(|&a| a));
        assert!((&st.eta - before).amax() < 1e-3);
    }

    #[test]
    fn mala_is_reproducible_in_parallel() {
        let (st, data, _) = random_setup(30, 4, 0, 2, 7);
        let streams = SweepStreams::new(11, 3);
        let (mut a, mut b) = (st.clone(), st);
        let fa = mala_update_eta(&mut a, &data, 0.3, true, true, &streams).unwrap();
        let fb = mala_update_eta(&mut b, &data, 0.3, true, false, &streams).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(a.eta, b.eta);
    }

    fn mean_precision(st: &mut ModelState, data: &Dataset, hyper: &Hyperparams, reps: usize) -> f64 {
        (0..reps)
            .map(|r| {
                gibbs_sigma2(st, data, hyper, &SweepStreams::new(1, r as u64)).unwrap();
                assert!(st.noise.sigma2_y > 0.0);
                1.0 / st.noise.sigma2_y
            })
            .sum::<f64>()
            / reps as f64
    }

    #[test]
    fn sigma2_closed_forms() {
        let hyper = Hyperparams::default();
        let (mut st, _, _) = random_setup(9, 2, 0, 2, 8);
        st.coef = RegressionCoefficients::zeros(2);
        let data = Dataset::fully_observed(DVector::zeros(9), DMatrix::zeros(9, 2), None).unwrap();
        let m = mean_precision(&mut st, &data, &hyper, 20_000);
        assert!((m - 10.0).abs() < 0.2, "{m}");

        let (mut st, _, _) = random_setup(4, 2, 0, 2, 9);
        st.coef = RegressionCoefficients::zeros(2);
        let data = Dataset::fully_observed(DVector::from_element(4, 1.0), DMatrix::zeros(4, 2), None).unwrap();
        let m = mean_precision(&mut st, &data, &hyper, 20_000);
        assert!((m - 1.0).abs() < 0.03, "{m}");
    }

    #[test]
    fn omega_tracks_least_squares_when_noise_vanishes() {
        let (mut st, mut data, mut hyper) = random_setup(200, 3, 0, 3, 10);
        hyper.prior_var_coef = 1e12;
        st.coef.big_omega.fill(0.0);
        let truth = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let mut r = rng(12);
        data.y = &st.eta * &truth + DVector::from_fn(200, |_, _| 0.1 * std_normal(&mut r));
        st.noise.sigma2_y = 1e-16;
        gibbs_omega(&mut st, &data, &hyper, &SweepStreams::new(2, 0)).unwrap();
        let ols = (st.eta.tr_mul(&st.eta)).cholesky().unwrap().solve(&st.eta.tr_mul(&data.y));
        assert!((&st.coef.omega - ols).amax() < 1e-6);
    }

    #[test]
    fn big_omega_single_factor_matches_univariate_conjugate() {
        let (mut st, data, hyper) = random_setup(30, 2, 0, 1, 13);
        let e2 = st.eta.map(|v| v * v);
        let resp = &data.y - &st.eta * &st.coef.omega;
        let s2 = st.noise.sigma2_y;
        let prec = e2.norm_squared() / s2 + 1.0 / hyper.prior_var_coef;
        let mean = e2.dot(&resp) / s2 / prec;
        let reps = 20_000;
        let mut sum = 0.0;
        for r in 0..reps {
            gibbs_big_omega(&mut st, &data, &hyper, &SweepStreams::new(3, r)).unwrap();
            sum += st.coef.big_omega[(0, 0)];
        }
        let sd = (1.0 / prec).sqrt();
        assert!((sum / reps as f64 - mean).abs() < 4.0 * sd / (reps as f64).sqrt());
    }

    #[test]
    fn big_omega_is_symmetric() {
        let (mut st, data, hyper) = random_setup(30, 4, 0, 3, 14);
        gibbs_big_omega(&mut st, &data, &hyper, &SweepStreams::new(4, 0)).unwrap();
        assert_eq!(st.coef.big_omega, st.coef.big_omega.transpose());
    }

    #[test]
    fn alpha_with_constant_covariate_is_intercept() {
        let (mut st, mut data, mut hyper) = random_setup(100, 3, 0, 2, 15);
        hyper.prior_var_coef = 1e12;
        data.z = Some(DMatrix::from_element(100, 1, 1.0));
        st.eta.fill(0.0);
        st.coef.alpha = Some(DVector::zeros(1));
        st.coef.delta = Some(DMatrix::zeros(2, 1));
        st.noise.sigma2_y = 1e-14;
        gibbs_alpha_delta(&mut st, &data, &hyper, &SweepStreams::new(5, 0)).unwrap();
        let a = st.coef.alpha.as_ref().unwrap()[0];
        assert!((a - data.y.mean()).abs() < 1e-5, "{a}");
        assert_eq!(st.coef.delta.as_ref().unwrap().shape(), (2, 1));
    }

    #[test]
    fn masked_row_stays_zero_and_phi_on_simplex() {
        let (mut st, _, mut hyper) = random_setup(20, 4, 0, 2, 16);
        hyper.block_groups = Some(vec![vec![0, 1], vec![2]]);
        let mask = crate::sampler::state::loading_mask(4, &hyper).unwrap().unwrap();
        st.loadings = crate::model::FactorLoadings::new(st.loadings.lambda.clone(), Some(mask)).unwrap();
        // exposure 3 belongs to no group and may load on nothing
        assert!(st.loadings.free_columns(3).is_empty());
        st.phi = DMatrix::from_fn(4, 2, |j, h| if st.loadings.is_masked(j, h) { 0.0 } else { 1.0 });
        for it in 0..20 {
            let s = SweepStreams::new(6, it);
            gibbs_lambda_rows(&mut st, &hyper, &s).unwrap();
            dl_local_updates(&mut st, &hyper, &s).unwrap();
            assert_eq!(st.loadings.lambda.row(3).amax(), 0.0);
            for j in 0..3 {
                let sum: f64 = st.loadings.free_columns(j).iter().map(|&h| st.phi[(j, h)]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(st.tau[j] > 0.0);
            }
        }
    }

    #[test]
    fn zero_loading_keeps_scales_finite() {
        let (mut st, _, hyper) = random_setup(10, 3, 0, 2, 17);
        st.loadings.lambda.fill(0.0);
        dl_local_updates(&mut st, &hyper, &SweepStreams::new(7, 0)).unwrap();
        assert!(st.phi.iter().chain(st.tau.iter()).chain(st.psi_local.iter()).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn imputation_respects_status() {
        let (mut st, data, _) = random_setup(30, 3, 0, 2, 18);
        let before = st.x_imputed.clone();
        impute_missing_and_lod(&mut st, &data, true, &SweepStreams::new(8, 0)).unwrap();
        assert_eq!(st.x_imputed, before);

        let mut status = DMatrix::from_element(30, 3, CellStatus::Observed);
        for i in 0..10 {
            status[(i, 0)] = CellStatus::BelowLod;
            status[(i + 10, 1)] = CellStatus::Missing;
        }
        let lod = vec![Some(-1.0), None, None];
        let data = Dataset::new(data.y.clone(), data.x.clone(), status, lod, None).unwrap();
        for it in 0..50 {
            impute_missing_and_lod(&mut st, &data, true, &SweepStreams::new(8, it)).unwrap();
            for i in 0..10 {
                assert!(st.x_imputed[(i, 0)] <= -1.0);
            }
            st.check_invariants(&data).unwrap();
        }
    }

    #[test]
    fn psi_updates_are_positive() {
        let (mut st, _, hyper) = random_setup(10, 3, 0, 2, 19);
        gibbs_psi(&mut st, &hyper, &SweepStreams::new(9, 0)).unwrap();
        assert!(st.noise.psi_diag.iter().all(|&v| v > 0.0));
    }
}
