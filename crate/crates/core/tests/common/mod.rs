//! Oracles and helpers shared by the integration tests. None of these call
//! into the solver; they are independent routes to the same quantities.
#![allow(dead_code)]

use alpha_margin::alpha::f_value;
use alpha_margin::AlphaParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHAS: [f64; 5] = [1.1, 1.25, 1.5, 1.75, 2.0];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random (θ, q, α) with k in `[k_min, k_max]`, θ uniform in `[lo, hi]`,
/// q in (0, 1] and α from the standard grid.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    k_min: usize,
    k_max: usize,
    lo: f64,
    hi: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let k = rng.random_range(k_min..=k_max);
    let theta = (0..k).map(|_| rng.random_range(lo..hi)).collect();
    let q = (0..k).map(|_| 1.0 - rng.random_range(0.0..0.99)).collect();
    let a = ALPHAS[rng.random_range(0..ALPHAS.len())];
    (theta, q, a)
}

/// Euclidean projection onto the simplex by sorting (sparsemax).
pub fn sparsemax_oracle(theta: &[f64]) -> Vec<f64> {
    let mut z = theta.to_vec();
    z.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, zi) in z.iter().enumerate() {
        cumsum += zi;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if zi - t > 0.0 {
            tau = t;
        }
    }
    theta.iter().map(|t| (t - tau).max(0.0)).collect()
}

pub fn weighted_softmax(theta: &[f64], q: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = theta
        .iter()
        .zip(q)
        .map(|(t, qj)| qj * (t - m).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Cross-entropy of the plain softmax.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - logits[y]
}

fn dense_divergence(p: &[f64], q: &[f64], params: &AlphaParams) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pj, qj)| qj * f_value(pj / qj, params).unwrap())
        .sum()
}

/// `max_{p ∈ Δ¹} ⟨p, θ⟩ − D_f(p : q)` by a grid scan followed by ternary
/// search on the (concave) objective.
pub fn grid_softmax_k2(theta: &[f64; 2], q: &[f64], params: &AlphaParams) -> f64 {
    let obj = |t: f64| {
        let p = [t, 1.0 - t];
        p[0] * theta[0] + p[1] * theta[1] - dense_divergence(&p, q, params)
    };
    let n = 100_000;
    let best = (0..=n)
        .map(|i| i as f64 / n as f64)
        .max_by(|a, b| obj(*a).total_cmp(&obj(*b)))
        .unwrap();
    let (mut lo, mut hi) = (
        (best - 1.0 / n as f64).max(0.0),
        (best + 1.0 / n as f64).min(1.0),
    );
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if obj(m1) < obj(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    obj(0.5 * (lo + hi)).max(obj(0.0)).max(obj(1.0))
}

pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor for entries near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// True when no `θ_j − τ` sits within `eps` of the clip point `−1/(α−1)`.
pub fn away_from_kink(theta: &[f64], tau: f64, alpha: f64, eps: f64) -> bool {
    let kink = -1.0 / (alpha - 1.0);
    theta.iter().all(|t| ((t - tau) - kink).abs() > eps)
}
