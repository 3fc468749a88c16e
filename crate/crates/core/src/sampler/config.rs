use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::MAX_ORDER;

/// Form of the latent regression `E[y | eta]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ResponseModel {
    /// `eta^T omega + eta^T Omega eta` with a full symmetric `Omega`.
    Quadratic,
    /// `sum_{q <= order} sum_h omega_h^(q) eta_h^q`, no cross-factor terms.
    Polynomial { order: usize },
}

/// Conditional used for the Dirichlet-Laplace local scales `psi_jh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DlPsiUpdate {
    /// `1 / psi_jh ~ InvGauss(tau_j phi_jh / |lambda_jh|, 1)`, the exact
    /// conditional of the Laplace scale mixture.
    Exact,
    /// `psi_jh ~ InvGauss(tau_j phi_jh, 1)`, independent of the loadings.
    /// Kept for comparison only; it does not target the posterior.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Number of latent factors.
    pub k: usize,
    /// Dirichlet concentration of the loading prior.
    pub dl_a: f64,
    /// Prior variance of every latent regression coefficient.
    pub prior_var_coef: f64,
    /// Inverse-gamma prior on `sigma^2` and each `sigma_j^2`.
    pub inv_gamma_shape: f64,
    pub inv_gamma_rate: f64,
    /// Initial MALA step size.
    pub mala_step: f64,
    pub mala_target_accept: f64,
    /// Scale MALA proposals by the Gaussian part of the factor posterior.
    pub mala_precondition: bool,
    /// Adapt the MALA step during burn-in.
    pub adapt_step: bool,
    /// Finish every sweep with Metropolis moves that rescale each factor
    /// jointly with its loadings and coefficients.
    pub scale_moves: bool,

    pub n_iter: usize,
    pub n_burn: usize,
    pub seed: u64,
    pub response: ResponseModel,
    pub dl_psi: DlPsiUpdate,
    /// Groups of exposure indices; group `g` may load only on factor `g`.
    pub block_groups: Option<Vec<Vec<usize>>>,
    /// Run row-wise blocks on the rayon pool.
    pub parallel: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k: 2,
            dl_a: 0.5,
            prior_var_coef: 100.0,
            inv_gamma_shape: 0.5,
            inv_gamma_rate: 0.5,
            mala_step: 0.1,
            mala_target_accept: 0.574,
            mala_precondition: true,
            adapt_step: true,
            scale_moves: true,
            n_iter: 5000,
            n_burn: 4000,
            seed: 1,
            response: ResponseModel::Quadratic,
            dl_psi: DlPsiUpdate::Exact,
            block_groups: None,
            parallel: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        let positive = [
            ("dl_a", self.dl_a),
            ("prior_var_coef", self.prior_var_coef),
            ("inv_gamma_shape", self.inv_gamma_shape),
            ("inv_gamma_rate", self.inv_gamma_rate),
            ("mala_step", self.mala_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.mala_target_accept > 0.0 && self.mala_target_accept < 1.0) {
            return Err(invalid("mala_target_accept must lie in (0, 1)"));
        }
        if self.n_burn >= self.n_iter {
            return Err(invalid(format!("n_burn ({}) must be below n_iter ({})", self.n_burn, self.n_iter)));
        }
        if let ResponseModel::Polynomial { order } = self.response {
            if order == 0 || order > MAX_ORDER {
                return Err(invalid(format!("polynomial order must be in 1..={MAX_ORDER}, got {order}")));
            }
        }
        if let Some(groups) = &self.block_groups {
            if groups.len() > self.k {
                return Err(invalid(format!("{} block groups need k >= {}", groups.len(), groups.len())));
            }
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.n_iter - self.n_burn
    }
}
