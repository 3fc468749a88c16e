//! Deterministic model mathematics: the posterior of the latent factors given
//! the predictors, the quadratic (and polynomial) regression on the predictor
//! scale that the latent regression induces, the rank rule for choosing the
//! number of factors and the Kullback-Leibler bound for an under-specified
//! rank.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::distributions::{sample_dirichlet_via_gamma, sample_gamma, std_normal};
use crate::error::{invalid, FinError, Result};
use crate::rng::RngStream;
use crate::stats::quantile;

/// Largest polynomial order supported for the induced expansion.
pub const MAX_ORDER: usize = 4;

/// `p x k` loadings with an optional structural-zero mask (`true` = fixed at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorLoadings {
    pub lambda: DMatrix<f64>,
    pub mask: Option<DMatrix<bool>>,
}

impl FactorLoadings {
    pub fn new(lambda: DMatrix<f64>, mask: Option<DMatrix<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.shape() != lambda.shape() {
                return Err(invalid(format!(
                    "mask is {:?} but loadings are {:?}",
                    m.shape(),
                    lambda.shape()
                )));
            }
        }
        let mut out = Self { lambda, mask };
        out.apply_mask();
        Ok(out)
    }

    pub fn unmasked(lambda: DMatrix<f64>) -> Self {
        Self { lambda, mask: None }
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn k(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn is_masked(&self, j: usize, h: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[(j, h)])
    }

    /// Column indices of row `j` that are free to move.
    pub fn free_columns(&self, j: usize) -> Vec<usize> {
        (0..self.k()).filter(|&h| !self.is_masked(j, h)).collect()
    }

    pub fn apply_mask(&mut self) {
        if let Some(m) = &self.mask {
            for (v, &fixed) in self.lambda.iter_mut().zip(m.iter()) {
                if fixed {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Block-sparsity mask: column `g` of the first `groups.len()` columns is
/// free only for rows in group `g`; remaining columns are unrestricted.
pub fn block_mask(p: usize, k: usize, groups: &[Vec<usize>]) -> Result<DMatrix<bool>> {
    if groups.len() > k {
        return Err(invalid(format!("{} groups need at least as many factors, k = {k}", groups.len())));
    }
    let mut mask = DMatrix::from_element(p, k, false);
    for (g, rows) in groups.iter().enumerate() {
        for j in 0..p {
            mask[(j, g)] = true;
        }
        for &j in rows {
            if j >= p {
                return Err(invalid(format!("group {g} references row {j} but p = {p}")));
            }
            mask[(j, g)] = false;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances {
    pub psi_diag: DVector<f64>,
    pub sigma2_y: f64,
}

/// Coefficients of the latent regression. `big_omega` is the symmetric `k x k`
/// interaction matrix; `omega_higher[q - 1]` holds the coefficients of
/// `eta_h^q` in the diagonal polynomial variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCoefficients {
    pub omega: DVector<f64>,
    pub big_omega: DMatrix<f64>,
    pub omega_higher: Option<Vec<DVector<f64>>>,
    pub alpha: Option<DVector<f64>>,
    pub delta: Option<DMatrix<f64>>,
}

impl RegressionCoefficients {
    pub fn zeros(k: usize) -> Self {
        Self {
            omega: DVector::zeros(k),
            big_omega: DMatrix::zeros(k, k),
            omega_higher: None,
            alpha: None,
            delta: None,
        }
    }
}

/// `eta | X ~ N(A X, V)` under the factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPosteriorMoments {
    /// `k x p`
    pub a: DMatrix<f64>,
    /// `k x k`
    pub v: DMatrix<f64>,
}

/// A monomial `prod_j x_j^{k_j}` written as the sorted list of its variable
/// indices with multiplicity, e.g. `[0, 0, 2]` is `x_0^2 x_2`.
pub type Monomial = Vec<usize>;

/// Regression of `y` on `X` implied by the latent model.
///
/// The matrix convention is used for `omega_x`: the regression coefficient of
/// `x_j x_l` (`j != l`) is `2 * omega_x[(j, l)]` and that of `x_j^2` is
/// `omega_x[(j, j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedCoefficients {
    pub intercept: f64,
    pub beta_x: DVector<f64>,
    pub omega_x: DMatrix<f64>,
    /// `p x q` exposure-by-covariate interactions `A^T Delta`.
    pub covariate_int: Option<DMatrix<f64>>,
    /// Monomial coefficients for orders three and above.
    pub higher_order: Option<BTreeMap<usize, BTreeMap<Monomial, f64>>>,
}

impl InducedCoefficients {
    pub fn zeros(p: usize) -> Self {
        Self {
            intercept: 0.0,
            beta_x: DVector::zeros(p),
            omega_x: DMatrix::zeros(p, p),
            covariate_int: None,
            higher_order: None,
        }
    }

    /// `intercept + beta^T x + x^T Omega_X x (+ x^T C z) + higher orders`.
    pub fn predict_mean(&self, x: &DVector<f64>, z: Option<&DVector<f64>>) -> f64 {
        let mut out = self.intercept + self.beta_x.dot(x) + x.dot(&(&self.omega_x * x));
        if let (Some(c), Some(z)) = (&self.covariate_int, z) {
            out += x.dot(&(c * z));
        }
        if let Some(h) = &self.higher_order {
            for terms in h.values() {
                out += evaluate_terms(terms, x);
            }
        }
        out
    }

    /// Largest absolute entrywise difference over intercept, main effects,
    /// interactions and covariate interactions.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d = (self.intercept - other.intercept).abs();
        d = d.max((&self.beta_x - &other.beta_x).amax());
        d = d.max((&self.omega_x - &other.omega_x).amax());
        if let (Some(a), Some(b)) = (&self.covariate_int, &other.covariate_int) {
            d = d.max((a - b).amax());
        }
        d
    }
}

pub fn evaluate_terms(terms: &BTreeMap<Monomial, f64>, x: &DVector<f64>) -> f64 {
    terms
        .iter()
        .map(|(m, c)| c * m.iter().map(|&j| x[j]).product::<f64>())
        .sum()
}

/// `V = (Lambda^T Psi^{-1} Lambda + I)^{-1}` and `A = V Lambda^T Psi^{-1}`
/// from one Cholesky factorization.
pub fn factor_posterior_moments(
    loadings: &FactorLoadings,
    noise: &NoiseVariances,
) -> Result<FactorPosteriorMoments> {
    let (p, k) = loadings.lambda.shape();
    if noise.psi_diag.len() != p {
        return Err(invalid(format!("Psi has {} entries but p = {p}", noise.psi_diag.len())));
    }
    if noise.psi_diag.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("Psi entries must be strictly positive"));
    }
    // Lambda^T Psi^{-1}
    let mut lt_pinv = loadings.lambda.transpose();
    for (j, mut col) in lt_pinv.column_iter_mut().enumerate() {
        col /= noise.psi_diag[j];
    }
    let mut prec = &lt_pinv * &loadings.lambda;
    for h in 0..k {
        prec[(h, h)] += 1.0;
    }
    let chol = prec
        .cholesky()
        .ok_or(FinError::NotPositiveDefinite { context: "factor posterior moments" })?;
    let a = chol.solve(&lt_pinv);
    let mut v = chol.inverse();
    symmetrize(&mut v);
    Ok(FactorPosteriorMoments { a, v })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Intercept `tr(Omega V)`, main effects `A^T omega`, interactions
/// `A^T Omega A` and, when present, covariate interactions `A^T Delta`.
pub fn induced_coefficients(
    moments: &FactorPosteriorMoments,
    coef: &RegressionCoefficients,
) -> Result<InducedCoefficients> {
    let (k, _p) = moments.a.shape();
    if coef.omega.len() != k || coef.big_omega.shape() != (k, k) {
        return Err(invalid(format!(
            "coefficients have k = {} / {:?} but moments have k = {k}",
            coef.omega.len(),
            coef.big_omega.shape()
        )));
    }
    if let Some(d) = &coef.delta {
        if d.nrows() != k {
            return Err(invalid(format!("Delta has {} rows but k = {k}", d.nrows())));
        }
    }
    let at = moments.a.transpose();
    let intercept = (&coef.big_omega * &moments.v).trace();
    let beta_x = &at * &coef.omega;
    let mut omega_x = &at * &coef.big_omega * &moments.a;
    symmetrize(&mut omega_x);
    let covariate_int = coef.delta.as_ref().map(|d| &at * d);
    Ok(InducedCoefficients { intercept, beta_x, omega_x, covariate_int, higher_order: None })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// `(n - 1)!!` style product over odd numbers, with `(-1)!! = 1`.
fn double_factorial_odd(n_minus_1: i64) -> f64 {
    let mut out = 1.0;
    let mut i = n_minus_1;
    while i > 1 {
        out *= i as f64;
        i -= 2;
    }
    out
}

/// Constant multiplying `sigma^{2q-2f} mu^{2f-1}` in `E[eta^{2q-1}]` for
/// `eta ~ N(mu, sigma^2)`.
pub fn b_odd(q: usize, f: usize) -> f64 {
    assert!(f >= 1 && f <= q);
    factorial(2 * q - 1) / (factorial(2 * f - 1) * factorial(q - f) * 2f64.powi((q - f) as i32))
}

/// Constant multiplying `sigma^{2q-2f} mu^{2f}` in `E[eta^{2q}]`.
pub fn b_even(q: usize, f: usize) -> f64 {
    assert!(f <= q);
    factorial(2 * q) / (factorial(2 * f) * factorial(q - f) * 2f64.powi((q - f) as i32))
}

/// Coefficient of `mu^m` in `E[eta^q]` for `eta ~ N(mu, s2)`:
/// `C(q, m) (q - m - 1)!! s2^{(q - m) / 2}` when `q - m` is even, else 0.
fn normal_moment_coefficient(q: usize, m: usize, s2: f64) -> f64 {
    if m > q || (q - m) % 2 == 1 {
        return 0.0;
    }
    let r = (q - m) / 2;
    binomial(q, m) * double_factorial_odd(q as i64 - m as i64 - 1) * s2.powi(r as i32)
}

/// Per-factor weight on `(sum_j a_hj x_j)^m` in `E[sum_q omega_h^(q) eta_h^q | X]`.
fn order_weights(moments: &FactorPosteriorMoments, omega_higher: &[DVector<f64>], m: usize) -> DVector<f64> {
    let k = moments.a.nrows();
    DVector::from_fn(k, |h, _| {
        omega_higher
            .iter()
            .enumerate()
            .map(|(qi, w)| w[h] * normal_moment_coefficient(qi + 1, m, moments.v[(h, h)]))
            .sum()
    })
}

fn validate_higher(moments: &FactorPosteriorMoments, omega_higher: &[DVector<f64>], target_order: usize) -> Result<()> {
    let q_max = omega_higher.len();
    if q_max > MAX_ORDER {
        return Err(invalid(format!("polynomial order {q_max} exceeds the supported maximum {MAX_ORDER}")));
    }
    if target_order > q_max {
        return Err(invalid(format!("target order {target_order} exceeds polynomial order {q_max}")));
    }
    let k = moments.a.nrows();
    if omega_higher.iter().any(|w| w.len() != k) {
        return Err(invalid(format!("every omega^(q) must have length k = {k}")));
    }
    Ok(())
}

fn multinomial_coefficient(mono: &[usize]) -> f64 {
    let mut out = factorial(mono.len());
    let mut i = 0;
    while i < mono.len() {
        let mut j = i;
        while j < mono.len() && mono[j] == mono[i] {
            j += 1;
        }
        out /= factorial(j - i);
        i = j;
    }
    out
}

/// Coefficient of a single monomial in `E[y | X]` under the diagonal
/// polynomial model `E[y | eta] = sum_q sum_h omega_h^(q) eta_h^q`.
pub fn monomial_coefficient(
    moments: &FactorPosteriorMoments,
    omega_higher: &[DVector<f64>],
    monomial: &[usize],
) -> Result<f64> {
    let m = monomial.len();
    validate_higher(moments, omega_higher, m)?;
    let mut mono = monomial.to_vec();
    mono.sort_unstable();
    let p = moments.a.ncols();
    if mono.iter().any(|&j| j >= p) {
        return Err(invalid(format!("monomial {mono:?} references a variable beyond p = {p}")));
    }
    let weights = order_weights(moments, omega_higher, m);
    let mult = multinomial_coefficient(&mono);
    Ok(mult
        * (0..moments.a.nrows())
            .map(|h| weights[h] * mono.iter().map(|&j| moments.a[(h, j)]).product::<f64>())
            .sum::<f64>())
}

fn for_each_multiset(p: usize, m: usize, start: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if cur.len() == m {
        f(cur);
        return;
    }
    for j in start..p {
        cur.push(j);
        for_each_multiset(p, m, j, cur, f);
        cur.pop();
    }
}

/// All coefficients of order `target_order` (0 = intercept) in `E[y | X]`
/// under the diagonal polynomial model of order `Q = omega_higher.len()`.
///
/// Expands `E[eta_h^q | X]` through the non-central normal moments and the
/// multinomial expansion of `(sum_j a_hj x_j)^m`, enumerating every monomial
/// exactly. Entries are keyed by [`Monomial`].
pub fn induced_higher_order(
    moments: &FactorPosteriorMoments,
    omega_higher: &[DVector<f64>],
    target_order: usize,
) -> Result<BTreeMap<Monomial, f64>> {
    validate_higher(moments, omega_higher, target_order)?;
    let (k, p) = moments.a.shape();
    let weights = order_weights(moments, omega_higher, target_order);
    let mut out = BTreeMap::new();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(out);
    }
    for_each_multiset(p, target_order, 0, &mut Vec::with_capacity(target_order), &mut |mono| {
        let mult = multinomial_coefficient(mono);
        let c: f64 = (0..k)
            .map(|h| weights[h] * mono.iter().map(|&j| moments.a[(h, j)]).product::<f64>())
            .sum();
        if c != 0.0 {
            out.insert(mono.to_vec(), mult * c);
        }
    });
    Ok(out)
}

/// Full induced regression for the diagonal polynomial model: orders 0-2 in
/// matrix form, orders 3 and above as monomial maps.
pub fn induced_polynomial(
    moments: &FactorPosteriorMoments,
    omega_higher: &[DVector<f64>],
) -> Result<InducedCoefficients> {
    let p = moments.a.ncols();
    let q_max = omega_higher.len();
    validate_higher(moments, omega_higher, 0)?;
    let w0 = order_weights(moments, omega_higher, 0);
    let intercept = w0.sum();
    let at = moments.a.transpose();
    let beta_x = if q_max >= 1 { &at * order_weights(moments, omega_higher, 1) } else { DVector::zeros(p) };
    let omega_x = if q_max >= 2 {
        let w2 = order_weights(moments, omega_higher, 2);
        let mut m = &at * DMatrix::from_diagonal(&w2) * &moments.a;
        symmetrize(&mut m);
        m
    } else {
        DMatrix::zeros(p, p)
    };
    let higher_order = if q_max >= 3 {
        let mut map = BTreeMap::new();
        for m in 3..=q_max {
            map.insert(m, induced_higher_order(moments, omega_higher, m)?);
        }
        Some(map)
    } else {
        None
    };
    Ok(InducedCoefficients { intercept, beta_x, omega_x, covariate_int: None, higher_order })
}

/// Smallest `k` with `sum_{j<=k} v_j / sum_j v_j > threshold` (strict).
pub fn select_k(values: &[f64], threshold: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(invalid("select_k needs at least one singular value"));
    }
    if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(invalid("singular values must be finite and non-negative"));
    }
    if values.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("singular values must be sorted in descending order"));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(invalid("singular values are all zero"));
    }
    let mut cum = 0.0;
    for (i, v) in values.iter().enumerate() {
        cum += v;
        if cum / total > threshold {
            return Ok(i + 1);
        }
    }
    Ok(values.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlBound {
    /// KL between the true covariance and its best rank-k factor approximation.
    pub kl: f64,
    /// `sum_{j > k} v_j / s0`.
    pub bound: f64,
}

impl KlBound {
    pub fn holds(&self) -> bool {
        self.kl <= self.bound * (1.0 + 1e-10) + 1e-12
    }
}

fn gaussian_kl_zero_mean(sigma0: &DMatrix<f64>, sigma1: &DMatrix<f64>) -> Result<f64> {
    let p = sigma0.nrows();
    let c0 = sigma0
        .clone()
        .cholesky()
        .ok_or(FinError::NotPositiveDefinite { context: "KL true covariance" })?;
    let c1 = sigma1
        .clone()
        .cholesky()
        .ok_or(FinError::NotPositiveDefinite { context: "KL approximate covariance" })?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| -> f64 {
        2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    };
    let tr = c1.solve(sigma0).trace();
    Ok(0.5 * (tr - p as f64 + logdet(&c1) - logdet(&c0)))
}

/// Compares `KL(N(0, L0 L0^T + s0 I) || N(0, L1 L1^T + s0 I))`, with
/// `L1 L1^T` the best rank-`k` approximation of `L0 L0^T`, against
/// `sum_{j > k} v_j / s0` where `v_j` are the eigenvalues of `L0 L0^T`.
pub fn kl_bound_check(lambda0: &DMatrix<f64>, s0: f64, k: usize) -> Result<KlBound> {
    let (p, k0) = lambda0.shape();
    if k >= k0 {
        return Err(invalid(format!("k = {k} must be below the true rank bound k0 = {k0}")));
    }
    if !(s0 > 0.0) {
        return Err(invalid("s0 must be positive"));
    }
    let gram = lambda0 * lambda0.transpose();
    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut approx = DMatrix::zeros(p, p);
    for &i in order.iter().take(k) {
        let q = eig.eigenvectors.column(i);
        approx += eig.eigenvalues[i].max(0.0) * q * q.transpose();
    }
    let mut sigma0 = gram;
    let mut sigma1 = approx;
    for i in 0..p {
        sigma0[(i, i)] += s0;
        sigma1[(i, i)] += s0;
    }
    let kl = gaussian_kl_zero_mean(&sigma0, &sigma1)?.max(0.0);
    let bound = vals.iter().take(k0).skip(k).sum::<f64>() / s0;
    let out = KlBound { kl, bound };
    debug_assert!(out.holds(), "KL bound violated: {out:?}");
    Ok(out)
}

/// Pooled draws from the prior on induced coefficients.
#[derive(Debug, Clone, Default)]
pub struct InducedPriorSamples {
    /// coefficients of `x_j`
    pub main: Vec<f64>,
    /// coefficients of `x_j x_{j+1}`
    pub pairwise: Vec<f64>,
    /// coefficients of `x_j x_{j+1} x_{j+2}`
    pub third: Vec<f64>,
}

impl InducedPriorSamples {
    /// `(lower, upper)` of the central interval holding `level` of each order.
    pub fn central_intervals(&self, level: f64) -> [(f64, f64); 3] {
        let t = 0.5 * (1.0 - level);
        let ci = |v: &[f64]| {
            if v.is_empty() {
                (0.0, 0.0)
            } else {
                (quantile(v, t), quantile(v, 1.0 - t))
            }
        };
        [ci(&self.main), ci(&self.pairwise), ci(&self.third)]
    }

    pub fn central_widths(&self, level: f64) -> [f64; 3] {
        self.central_intervals(level).map(|(lo, hi)| hi - lo)
    }
}

/// Draws `(Lambda, Psi)` from the Dirichlet-Laplace / inverse-gamma priors
/// and `omega^(1..3)` elementwise `N(0, 1)`, then maps each draw through the
/// order-3 diagonal polynomial expansion. Draw `d` uses stream `d` under `seed`.
pub fn simulate_induced_prior(p: usize, k: usize, dl_a: f64, n_draws: usize, seed: u64) -> Result<InducedPriorSamples> {
    if n_draws == 0 {
        return Err(invalid("n_draws must be at least 1"));
    }
    if p == 0 || !(dl_a > 0.0) {
        return Err(invalid("simulate_induced_prior needs p >= 1 and dl_a > 0"));
    }
    let per_draw: Vec<Result<InducedPriorSamples>> = (0..n_draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = RngStream::new(seed, d as u64).rng();
            let mut out = InducedPriorSamples::default();
            if k == 0 {
                out.main = vec![0.0; p];
                out.pairwise = vec![0.0; p.saturating_sub(1)];
                out.third = vec![0.0; p.saturating_sub(2)];
                return Ok(out);
            }
            let mut lambda = DMatrix::zeros(p, k);
            for j in 0..p {
                let phi = sample_dirichlet_via_gamma(dl_a, k, &mut rng)?;
                let tau = sample_gamma(k as f64 * dl_a, 0.5, &mut rng)?;
                for h in 0..k {
                    let psi = sample_gamma(1.0, 0.5, &mut rng)?;
                    lambda[(j, h)] = std_normal(&mut rng) * (psi).sqrt() * phi[h] * tau;
                }
            }
            let mut psi_diag = DVector::zeros(p);
            for j in 0..p {
                psi_diag[j] = 1.0 / sample_gamma(0.5, 0.5, &mut rng)?;
            }
            let moments = factor_posterior_moments(
                &FactorLoadings::unmasked(lambda),
                &NoiseVariances { psi_diag, sigma2_y: 1.0 },
            )?;
            let omegas: Vec<DVector<f64>> = (0..3).map(|_| crate::distributions::std_normal_vec(k, &mut rng)).collect();
            for j in 0..p {
                out.main.push(monomial_coefficient(&moments, &omegas, &[j])?);
            }
            for j in 0..p.saturating_sub(1) {
                out.pairwise.push(monomial_coefficient(&moments, &omegas, &[j, j + 1])?);
            }
            for j in 0..p.saturating_sub(2) {
                out.third.push(monomial_coefficient(&moments, &omegas, &[j, j + 1, j + 2])?);
            }
            Ok(out)
        })
        .collect();
    let mut all = InducedPriorSamples::default();
    for r in per_draw {
        let s = r?;
        all.main.extend(s.main);
        all.pairwise.extend(s.pairwise);
        all.third.extend(s.third);
    }
    Ok(all)
}
