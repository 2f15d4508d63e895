//! α-divergence kernel.
//!
//! The divergence is generated by
//!
//! ```text
//! f(u) = ((u^α − 1) − α(u − 1)) / (α(α − 1)),   α > 1
//! ```
//!
//! and the regularized prediction map (α-softargmax) is
//!
//! ```text
//! p_j = q_j · [1 + (α − 1)(θ_j − τ*)]_+^(1/(α−1))
//! ```
//!
//! where τ* is the unique root of `Σ_j q_j f*'(θ_j − τ) = 1`, found by
//! bisection. Entries whose clip evaluates to exactly zero are left out of the
//! sparse posterior.

use crate::error::{Error, Result};

/// Residual magnitude at which bisection stops early.
pub const RESIDUAL_TOL: f64 = 1e-12;

/// Divergence index and bisection controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParams {
    alpha: f64,
    bisect_tol: f64,
    max_iters: usize,
}

impl AlphaParams {
    pub const DEFAULT_BISECT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 200;

    /// Parameters with default solver tolerances.
    pub fn new(alpha: f64) -> Result<Self> {
        Self::with_tolerances(alpha, Self::DEFAULT_BISECT_TOL, Self::DEFAULT_MAX_ITERS)
    }

    pub fn with_tolerances(alpha: f64, bisect_tol: f64, max_iters: usize) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be finite and > 1, got {alpha}"
            )));
        }
        if !(bisect_tol.is_finite() && bisect_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bisect_tol must be > 0, got {bisect_tol}"
            )));
        }
        if max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        Ok(Self {
            alpha,
            bisect_tol,
            max_iters,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bisect_tol(&self) -> f64 {
        self.bisect_tol
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }
}

/// Logits θ over k ≥ 2 classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 logits, got {}",
                values.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("logit {j} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Reference measure q: strictly positive class weights, not necessarily
/// normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMeasure(Vec<f64>);

impl ReferenceMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("reference measure".into()));
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Domain(format!(
                "reference weight {j} must be finite and > 0, got {}",
                weights[j]
            )));
        }
        Ok(Self(weights))
    }

    /// The all-ones measure over `k` classes.
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A probability vector over `k` classes stored by its nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDistribution {
    support: Vec<(usize, f64)>,
    k: usize,
}

impl PosteriorDistribution {
    /// Builds a posterior from a dense vector, keeping strictly positive
    /// entries only.
    pub fn from_dense(p: &[f64]) -> Result<Self> {
        if let Some(j) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(format!(
                "probability {j} must be finite and >= 0, got {}",
                p[j]
            )));
        }
        let support: Vec<(usize, f64)> = p
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(j, v)| (j, *v))
            .collect();
        let total: f64 = support.iter().map(|(_, v)| v).sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            support,
            k: p.len(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Nonzero `(index, probability)` pairs in increasing index order.
    pub fn support(&self) -> &[(usize, f64)] {
        &self.support
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    /// Number of classes receiving exactly zero probability.
    pub fn zero_count(&self) -> usize {
        self.k - self.support.len()
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.support
            .binary_search_by_key(&j, |(i, _)| *i)
            .map(|pos| self.support[pos].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for &(j, v) in &self.support {
            out[j] = v;
        }
        out
    }
}

/// `x^e` for `x ≥ 0`, with `0^e = 0`.
#[inline]
fn pow_nonneg(x: f64, e: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (e * x.ln()).exp()
    }
}

/// The generator f(u).
pub fn f_value(u: f64, params: &AlphaParams) -> Result<f64> {
    if u.is_nan() || u < 0.0 {
        return Err(Error::Domain(format!("f(u) needs u >= 0, got {u}")));
    }
    let a = params.alpha;
    Ok(((pow_nonneg(u, a) - 1.0) - a * (u - 1.0)) / (a * (a - 1.0)))
}

/// f'(u) = (u^(α−1) − 1)/(α − 1).
pub fn f_prime(u: f64, params: &AlphaParams) -> Result<f64> {
    let a = params.alpha;
    if !(u > 0.0 || (u == 0.0 && a >= 2.0)) {
        return Err(Error::Domain(format!(
            "f'(u) undefined at u = {u}, alpha = {a}"
        )));
    }
    Ok((pow_nonneg(u, a - 1.0) - 1.0) / (a - 1.0))
}

/// Derivative of the convex conjugate, `[1 + (α−1)v]_+^(1/(α−1))`.
#[inline]
pub fn f_conj_prime(v: f64, params: &AlphaParams) -> f64 {
    let a = params.alpha;
    pow_nonneg(1.0 + (a - 1.0) * v, 1.0 / (a - 1.0))
}

/// The convex conjugate `f*(v) = ([1 + (α−1)v]_+^(α/(α−1)) − 1)/α`.
pub fn f_conj(v: f64, params: &AlphaParams) -> f64 {
    let a = params.alpha;
    (pow_nonneg(1.0 + (a - 1.0) * v, a / (a - 1.0)) - 1.0) / a
}

/// D_f(p : q) = Σ_j q_j f(p_j / q_j) for a dense `p`.
pub fn divergence(p: &[f64], q: &ReferenceMeasure, params: &AlphaParams) -> Result<f64> {
    let qs = q.as_slice();
    if p.len() != qs.len() {
        return Err(Error::DimensionMismatch {
            expected: qs.len(),
            got: p.len(),
        });
    }
    p.iter()
        .zip(qs)
        .map(|(&pj, &qj)| Ok(qj * f_value(pj / qj, params)?))
        .sum()
}

fn check_dims(theta: &LogitVector, q: &ReferenceMeasure) -> Result<()> {
    if theta.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// `Σ_j q_j f*'(θ_j − τ) − 1`; nonincreasing in τ.
pub fn tau_residual(theta: &[f64], q: &[f64], tau: f64, params: &AlphaParams) -> f64 {
    theta
        .iter()
        .zip(q)
        .map(|(&t, &w)| w * f_conj_prime(t - tau, params))
        .sum::<f64>()
        - 1.0
}

/// Initial bisection bracket `[τ_min, τ_max]` anchored at the largest logit.
pub fn tau_bracket(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<(f64, f64)> {
    check_dims(theta, q)?;
    let th = theta.as_slice();
    let qs = q.as_slice();
    let t = th
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > th[best] { j } else { best });
    let lo = th[t] - f_prime(1.0 / qs[t], params)?;
    let hi = th[t] - f_prime(1.0 / q.total(), params)?;
    Ok((lo, hi))
}

/// Solves `Σ_j q_j f*'(θ_j − τ) = 1` for τ by bisection.
pub fn root_find_tau(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<f64> {
    let (mut lo, mut hi) = tau_bracket(theta, q, params)?;
    if lo == hi {
        return Ok(lo);
    }
    let th = theta.as_slice();
    let qs = q.as_slice();
    let r_lo = tau_residual(th, qs, lo, params);
    let r_hi = tau_residual(th, qs, hi, params);
    // The bracket ends are exact roots up to rounding; allow a few ulps.
    if r_lo < -1e-9 || r_hi > 1e-9 || !r_lo.is_finite() || !r_hi.is_finite() {
        return Err(Error::Solver(format!(
            "bracket [{lo}, {hi}] does not straddle the root (residuals {r_lo}, {r_hi})"
        )));
    }
    if r_lo.abs() <= RESIDUAL_TOL {
        return Ok(lo);
    }
    if r_hi.abs() <= RESIDUAL_TOL {
        return Ok(hi);
    }
    for _ in 0..params.max_iters {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Bracket is at floating-point resolution.
            return Ok(mid);
        }
        let r = tau_residual(th, qs, mid, params);
        if r.abs() <= RESIDUAL_TOL {
            return Ok(mid);
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= params.bisect_tol {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Solver(format!(
        "bisection did not reach width {} within {} iterations (width {})",
        params.bisect_tol,
        params.max_iters,
        hi - lo
    )))
}

/// Unnormalized posterior entries `q_j f*'(θ_j − τ)` at a given τ.
fn clipped_weights(theta: &[f64], q: &[f64], tau: f64, params: &AlphaParams) -> Vec<f64> {
    theta
        .iter()
        .zip(q)
        .map(|(&t, &w)| w * f_conj_prime(t - tau, params))
        .collect()
}

/// α-softargmax together with the threshold τ* that produced it.
pub fn alpha_softargmax_with_tau(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<(f64, PosteriorDistribution)> {
    let tau = root_find_tau(theta, q, params)?;
    let raw = clipped_weights(theta.as_slice(), q.as_slice(), tau, params);
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Solver(format!(
            "posterior mass {total} at tau {tau}"
        )));
    }
    let support = raw
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(j, v)| (j, v / total))
        .collect();
    Ok((
        tau,
        PosteriorDistribution {
            support,
            k: theta.len(),
        },
    ))
}

/// The regularized prediction map `argmax_{p ∈ Δ} ⟨p, θ⟩ − D_f(p : q)`.
pub fn alpha_softargmax(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<PosteriorDistribution> {
    alpha_softargmax_with_tau(theta, q, params).map(|(_, p)| p)
}

/// softmax_f(θ) = ⟨p*, θ⟩ − D_f(p* : q).
pub fn alpha_softmax(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<f64> {
    let p = alpha_softargmax(theta, q, params)?;
    softmax_value_at(theta, q, &p, params)
}

/// Objective `⟨p, θ⟩ − D_f(p : q)` at a given posterior.
pub(crate) fn softmax_value_at(
    theta: &LogitVector,
    q: &ReferenceMeasure,
    p: &PosteriorDistribution,
    params: &AlphaParams,
) -> Result<f64> {
    let dense = p.to_dense();
    let inner: f64 = dense.iter().zip(theta.as_slice()).map(|(a, b)| a * b).sum();
    Ok(inner - divergence(&dense, q, params)?)
}
