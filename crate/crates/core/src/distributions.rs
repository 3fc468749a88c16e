//! Random variate generators for the conditionals of the sampler.
//!
//! Every sampler takes `&mut R: Rng` so callers decide which stream a draw
//! comes from; see [`crate::rng::RngStream`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use crate::error::{invalid, FinError, Result};

/// Variance (or precision pivot) below which a coordinate is treated as fixed.
pub const DEGENERATE_TOL: f64 = 1e-14;

/// Standardized truncation point beyond which the tail sampler is used.
const TAIL_CUTOFF: f64 = 4.0;

/// Below this `b` a GIG with positive order is drawn from its gamma limit.
const GIG_B_GUARD: f64 = 1e-10;

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn std_normal_vec<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.sample(StandardNormal))
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function, accurate far into the upper tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse of [`norm_sf`].
fn norm_isf(q: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * q)
}

/// Draw from `N(mean, cov)`.
///
/// When every diagonal entry of `cov` is at most [`DEGENERATE_TOL`] the mean
/// is returned unchanged.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let m = mean.len();
    if cov.nrows() != m || cov.ncols() != m {
        return Err(invalid(format!(
            "covariance is {}x{} but mean has length {m}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.diagonal().iter().all(|&v| v <= DEGENERATE_TOL) {
        return Ok(mean.clone());
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(FinError::NotPositiveDefinite { context: "sample_mvn covariance" })?;
    let z = std_normal_vec(m, rng);
    Ok(mean + chol.l() * z)
}

/// Draw from the Gaussian with precision `q` and canonical mean `b`, i.e.
/// `N(q^{-1} b, q^{-1})`, using one Cholesky factorization of `q`.
///
/// `context` names the calling block in the error when `q` is not positive
/// definite.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    q: DMatrix<f64>,
    b: &DVector<f64>,
    context: &'static str,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let m = b.len();
    if q.nrows() != m || q.ncols() != m {
        return Err(invalid(format!(
            "precision is {}x{} but linear term has length {m}",
            q.nrows(),
            q.ncols()
        )));
    }
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let chol = q
        .cholesky()
        .ok_or(FinError::NotPositiveDefinite { context })?;
    let mean = chol.solve(b);
    // x = mean + L^{-T} z has covariance (L L^T)^{-1}
    let z = std_normal_vec(m, rng);
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(FinError::NotPositiveDefinite { context })?;
    Ok(mean + dev)
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
        return Err(invalid(format!("gamma needs shape > 0 and rate > 0, got ({shape}, {rate})")));
    }
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|e| invalid(e.to_string()))?;
    loop {
        let x = dist.sample(rng);
        if x > 0.0 && x.is_finite() {
            return Ok(x);
        }
    }
}

/// Symmetric Dirichlet(shape, ..., shape) of dimension `dim`, via normalized gammas.
pub fn sample_dirichlet_via_gamma<R: Rng + ?Sized>(
    shape: f64,
    dim: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if dim == 0 {
        return Err(invalid("dirichlet dimension must be positive"));
    }
    loop {
        let mut g = DVector::zeros(dim);
        for v in g.iter_mut() {
            *v = sample_gamma(shape, 1.0, rng)?;
        }
        let total = g.sum();
        if total > 0.0 && total.is_finite() {
            return Ok(g / total);
        }
    }
}

/// Inverse Gaussian with mean `mu` and shape `lambda`
/// (Michael, Schucany and Haas transformation).
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mu: f64, lambda: f64, rng: &mut R) -> Result<f64> {
    if !(mu > 0.0 && lambda > 0.0) || mu.is_nan() || lambda.is_nan() {
        return Err(invalid(format!("inverse gaussian needs mu > 0 and lambda > 0, got ({mu}, {lambda})")));
    }
    if mu.is_infinite() {
        // Levy limit: lambda / Z^2
        let z = std_normal(rng);
        return Ok(lambda / (z * z).max(f64::MIN_POSITIVE));
    }
    let nu = std_normal(rng);
    let w = mu * nu * nu;
    // smaller root of the quadratic, written without cancellation:
    // x = mu * 4 lambda w / (w + sqrt(w^2 + 4 lambda w))^2
    let x = if w > 0.0 {
        let s = (w * w + 4.0 * lambda * w).sqrt();
        let denom = w + s;
        mu * (4.0 * lambda * w) / (denom * denom)
    } else {
        mu
    };
    let x = x.max(f64::MIN_POSITIVE);
    let u: f64 = rng.random();
    let out = if u <= mu / (mu + x) { x } else { mu * mu / x };
    Ok(out.clamp(f64::MIN_POSITIVE, f64::MAX))
}

/// Generalized inverse Gaussian with density proportional to
/// `x^(p-1) exp(-(a x + b / x) / 2)`.
///
/// Uses the ratio-of-uniforms family of Hörmann and Leydold: mode-shifted
/// ROU for large order or concentration, plain ROU in the middle range and a
/// piecewise-envelope rejection sampler for small concentration.
pub fn sample_gig<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !p.is_finite() || !a.is_finite() || !b.is_finite() {
        return Err(invalid(format!("GIG needs a > 0, b > 0 and finite p, got p={p}, a={a}, b={b}")));
    }
    if b < GIG_B_GUARD && p > 0.0 {
        return sample_gamma(p, a / 2.0, rng);
    }
    let lambda = p.abs();
    let omega = (a * b).sqrt();
    let alpha = (b / a).sqrt();
    let y = if lambda > 2.0 || omega > 3.0 {
        gig_rou_shift(lambda, omega, rng)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        gig_rou_noshift(lambda, omega, rng)
    } else {
        gig_small_omega(lambda, omega, rng)
    };
    let x = if p < 0.0 { alpha / y } else { alpha * y };
    Ok(x.clamp(f64::MIN_POSITIVE, f64::MAX))
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0) * (lambda - 1.0) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda) * (1.0 - lambda) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn gig_rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0) * (lambda + 1.0) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * rng.random::<f64>();
        let v: f64 = rng.random();
        let x = u / v;
        if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    // roots of the cubic locating the extrema of the shifted envelope
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let pp = b - a * a / 3.0;
    let qq = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;
    let fi = (-qq / (2.0 * (-(pp * pp * pp) / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-pp / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
    loop {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v: f64 = rng.random();
        let x = u / v + xm;
        if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_small_omega<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * rng.random::<f64>();
        let (x, hx) = if v <= a0 {
            (x0 * v / a0, k0)
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    let x = omega * (omega.exp() * v).exp();
                    (x, k1 / x)
                } else {
                    let x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    (x, k1 * x.powf(lambda - 1.0))
                }
            } else {
                v -= a1;
                let lo = x0.max(2.0 / omega);
                let x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
                (x, k2 * (-omega / 2.0 * x).exp())
            }
        };
        if !(x > 0.0 && x.is_finite()) {
            continue;
        }
        let u = rng.random::<f64>() * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

/// Draw from `N(mu, sigma2)` restricted to `[lower, upper]`; either bound may
/// be infinite.
///
/// Inverse-CDF for mild truncation; Robert's exponential-proposal rejection
/// when the interval starts more than four standard deviations into a tail.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mu: f64,
    sigma2: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(lower < upper) {
        return Err(invalid(format!("truncated normal needs lower < upper, got [{lower}, {upper}]")));
    }
    if !(sigma2 > 0.0) || !mu.is_finite() || !sigma2.is_finite() {
        return Err(invalid(format!("truncated normal needs finite mu and sigma2 > 0, got ({mu}, {sigma2})")));
    }
    let sd = sigma2.sqrt();
    let lo = (lower - mu) / sd;
    let hi = (upper - mu) / sd;
    let z = if lo > TAIL_CUTOFF {
        std_tail(lo, hi, rng)
    } else if hi < -TAIL_CUTOFF {
        -std_tail(-hi, -lo, rng)
    } else {
        std_inverse_cdf(lo, hi, rng)
    };
    Ok((mu + sd * z).clamp(lower, upper))
}

fn std_inverse_cdf<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if lo >= 0.0 {
        // upper half: invert the survival function to keep tail precision
        let (sl, sh) = (norm_sf(lo), norm_sf(hi));
        let q = sh + u * (sl - sh);
        norm_isf(q).clamp(lo, hi)
    } else if hi <= 0.0 {
        let (sl, sh) = (norm_sf(-hi), norm_sf(-lo));
        let q = sl + u * (sh - sl);
        (-norm_isf(q)).clamp(lo, hi)
    } else {
        let (cl, ch) = (norm_cdf(lo), norm_cdf(hi));
        let c = cl + u * (ch - cl);
        (-norm_isf(c)).clamp(lo, hi)
    }
}

/// Standard normal restricted to `[lo, hi]` with `lo > 0` far in the tail.
fn std_tail<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi.is_finite() && hi - lo < 1.0 / lo {
        // narrow window: uniform proposal against exp(-(z^2 - lo^2) / 2)
        loop {
            let z = lo + (hi - lo) * rng.random::<f64>();
            let u: f64 = rng.random();
            if u.ln() <= -0.5 * (z * z - lo * lo) {
                return z;
            }
        }
    }
    let rate = 0.5 * (lo + (lo * lo + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = lo + e / rate;
        if z > hi {
            continue;
        }
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (z - rate) * (z - rate) {
            return z;
        }
    }
}
