use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::config::{Hyperparams, ResponseModel};
use super::data::{CellStatus, Dataset};
use crate::distributions::{sample_dirichlet_via_gamma, sample_gamma, std_normal, std_normal_vec};
use crate::error::{FinError, Result};
use crate::model::{block_mask, FactorLoadings, NoiseVariances, RegressionCoefficients};

/// Every unknown of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// `n x k`, row `i` is `eta_i`.
    pub eta: DMatrix<f64>,
    pub loadings: FactorLoadings,
    pub coef: RegressionCoefficients,
    pub noise: NoiseVariances,
    /// `p x k` Dirichlet allocations, rows on the simplex over free columns.
    pub phi: DMatrix<f64>,
    pub tau: DVector<f64>,
    /// `p x k` local exponential scales.
    pub psi_local: DMatrix<f64>,
    /// `X` with the current imputations filled in.
    pub x_imputed: DMatrix<f64>,
}

pub(crate) fn loading_mask(p: usize, hyper: &Hyperparams) -> Result<Option<DMatrix<bool>>> {
    hyper.block_groups.as_ref().map(|g| block_mask(p, hyper.k, g)).transpose()
}

fn empty_coefficients(k: usize, q: usize, hyper: &Hyperparams) -> RegressionCoefficients {
    let mut coef = RegressionCoefficients::zeros(k);
    if let ResponseModel::Polynomial { order } = hyper.response {
        coef.omega_higher = Some(vec![DVector::zeros(k); order]);
    }
    if q > 0 {
        coef.alpha = Some(DVector::zeros(q));
        coef.delta = Some(DMatrix::zeros(k, q));
    }
    coef
}

/// Keeps the matrix-form coefficients in step with the polynomial ones so
/// that `omega` is the linear and `big_omega` the diagonal quadratic part.
pub(crate) fn sync_polynomial(coef: &mut RegressionCoefficients) {
    if let Some(w) = &coef.omega_higher {
        let k = coef.omega.len();
        coef.omega = w.first().cloned().unwrap_or_else(|| DVector::zeros(k));
        coef.big_omega = match w.get(1) {
            Some(w2) => DMatrix::from_diagonal(w2),
            None => DMatrix::zeros(k, k),
        };
    }
}

impl ModelState {
    pub fn n(&self) -> usize {
        self.eta.nrows()
    }

    pub fn p(&self) -> usize {
        self.loadings.p()
    }

    pub fn k(&self) -> usize {
        self.loadings.k()
    }

    /// Deterministic start from the leading singular vectors of the
    /// mean-filled predictor matrix.
    pub fn initialize(data: &Dataset, hyper: &Hyperparams) -> Result<Self> {
        let (n, p) = (data.n(), data.p());
        let k = hyper.k;
        let means = data.observed_column_means();
        let mut x_imp = data.x.clone();
        for j in 0..p {
            for i in 0..n {
                match data.status[(i, j)] {
                    CellStatus::Observed => {}
                    CellStatus::Missing => x_imp[(i, j)] = means[j],
                    CellStatus::BelowLod => {
                        let lod = data.lod[j].expect("validated at construction");
                        x_imp[(i, j)] = means[j].min(lod);
                    }
                }
            }
        }
        let svd = x_imp.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let vt = svd.v_t.as_ref().expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut eta = DMatrix::zeros(n, k);
        let mut lambda = DMatrix::zeros(p, k);
        let scale = (n as f64).sqrt();
        for (h, &c) in order.iter().take(k).enumerate() {
            let s = svd.singular_values[c];
            for i in 0..n {
                eta[(i, h)] = u[(i, c)] * scale;
            }
            for j in 0..p {
                lambda[(j, h)] = vt[(c, j)] * s / scale;
            }
        }
        let loadings = FactorLoadings::new(lambda, loading_mask(p, hyper)?)?;
        let fitted = &eta * loadings.lambda.transpose();
        let psi_diag = DVector::from_fn(p, |j, _| {
            let r = x_imp.column(j) - fitted.column(j);
            (r.norm_squared() / n as f64).max(0.05)
        });
        let y_mean = data.y.mean();
        let sigma2_y = (data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).max(1e-3);
        let mut coef = empty_coefficients(k, data.q(), hyper);
        sync_polynomial(&mut coef);
        let mut phi = DMatrix::zeros(p, k);
        for j in 0..p {
            let free = loadings.free_columns(j);
            for &h in &free {
                phi[(j, h)] = 1.0 / free.len() as f64;
            }
        }
        Ok(Self {
            eta,
            loadings,
            coef,
            noise: NoiseVariances { psi_diag, sigma2_y },
            phi,
            tau: DVector::from_element(p, 1.0),
            psi_local: DMatrix::from_element(p, k, 1.0),
            x_imputed: x_imp,
        })
    }

    /// One joint draw of every unknown from the prior, with `eta` drawn for
    /// `n` units. `x_imputed` is left at zero.
    pub fn sample_prior<R: Rng + ?Sized>(n: usize, p: usize, q: usize, hyper: &Hyperparams, rng: &mut R) -> Result<Self> {
        let k = hyper.k;
        let mask = loading_mask(p, hyper)?;
        let mut phi = DMatrix::zeros(p, k);
        let mut tau = DVector::zeros(p);
        let mut psi_local = DMatrix::from_element(p, k, 1.0);
        let mut lambda = DMatrix::zeros(p, k);
        for j in 0..p {
            let free: Vec<usize> = (0..k).filter(|&h| !mask.as_ref().is_some_and(|m| m[(j, h)])).collect();
            if free.is_empty() {
                tau[j] = sample_gamma(k as f64 * hyper.dl_a, 0.5, rng)?;
                continue;
            }
            let dir = sample_dirichlet_via_gamma(hyper.dl_a, free.len(), rng)?;
            tau[j] = sample_gamma(free.len() as f64 * hyper.dl_a, 0.5, rng)?;
            for (idx, &h) in free.iter().enumerate() {
                phi[(j, h)] = dir[idx];
                psi_local[(j, h)] = sample_gamma(1.0, 0.5, rng)?;
                let sd = psi_local[(j, h)].sqrt() * phi[(j, h)] * tau[j];
                lambda[(j, h)] = sd * std_normal(rng);
            }
        }
        let loadings = FactorLoadings::new(lambda, mask)?;
        let inv_gamma = |rng: &mut R| -> Result<f64> {
            Ok(1.0 / sample_gamma(hyper.inv_gamma_shape, hyper.inv_gamma_rate, rng)?)
        };
        let psi_diag = DVector::from_iterator(p, (0..p).map(|_| inv_gamma(rng)).collect::<Result<Vec<_>>>()?);
        let sigma2_y = inv_gamma(rng)?;
        let sd = hyper.prior_var_coef.sqrt();
        let mut coef = empty_coefficients(k, q, hyper);
        match hyper.response {
            ResponseModel::Quadratic => {
                coef.omega = std_normal_vec(k, rng) * sd;
                for h in 0..k {
                    for l in h..k {
                        let c = sd * std_normal(rng);
                        if h == l {
                            coef.big_omega[(h, h)] = c;
                        } else {
                            coef.big_omega[(h, l)] = 0.5 * c;
                            coef.big_omega[(l, h)] = 0.5 * c;
                        }
                    }
                }
            }
            ResponseModel::Polynomial { order } => {
                coef.omega_higher = Some((0..order).map(|_| std_normal_vec(k, rng) * sd).collect());
                sync_polynomial(&mut coef);
            }
        }
        if q > 0 {
            coef.alpha = Some(std_normal_vec(q, rng) * sd);
            coef.delta = Some(DMatrix::from_fn(k, q, |_, _| sd * std_normal(rng)));
        }
        let eta = DMatrix::from_fn(n, k, |_, _| std_normal(rng));
        Ok(Self {
            eta,
            loadings,
            coef,
            noise: NoiseVariances { psi_diag, sigma2_y },
            phi,
            tau,
            psi_local,
            x_imputed: DMatrix::zeros(n, p),
        })
    }

    /// Checks simplex rows, positive scales, symmetric `Omega`, masked zeros
    /// and LOD bounds of the imputations.
    pub fn check_invariants(&self, data: &Dataset) -> Result<()> {
        let fail = |m: String| Err(FinError::Invariant(m));
        for j in 0..self.p() {
            let free = self.loadings.free_columns(j);
            if !free.is_empty() {
                let s: f64 = free.iter().map(|&h| self.phi[(j, h)]).sum();
                if (s - 1.0).abs() > 1e-10 {
                    return fail(format!("phi row {j} sums to {s}"));
                }
            }
            if !(self.tau[j] > 0.0) {
                return fail(format!("tau[{j}] = {} is not positive", self.tau[j]));
            }
            if !(self.noise.psi_diag[j] > 0.0) {
                return fail(format!("sigma_{j}^2 is not positive"));
            }
            for h in 0..self.k() {
                if !(self.psi_local[(j, h)] > 0.0) {
                    return fail(format!("psi_local[{j},{h}] is not positive"));
                }
                if self.loadings.is_masked(j, h) && self.loadings.lambda[(j, h)] != 0.0 {
                    return fail(format!("masked loading ({j},{h}) is nonzero"));
                }
            }
        }
        if !(self.noise.sigma2_y > 0.0) {
            return fail("sigma^2 is not positive".into());
        }
        let om = &self.coef.big_omega;
        if (om - om.transpose()).amax() > 1e-12 {
            return fail("Omega is not symmetric".into());
        }
        for j in 0..data.p() {
            for i in 0..data.n() {
                match data.status[(i, j)] {
                    CellStatus::Observed if self.x_imputed[(i, j)] != data.x[(i, j)] => {
                        return fail(format!("observed cell ({i},{j}) was modified"));
                    }
                    CellStatus::BelowLod if self.x_imputed[(i, j)] > data.lod[j].unwrap_or(f64::INFINITY) => {
                        return fail(format!("below-LOD cell ({i},{j}) exceeds its limit"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
