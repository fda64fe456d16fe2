//! The scalar weight process and its exponent.
//!
//! The weight solves `d mu = -E mu ds - F mu dW`, `mu(0) = 1`, so along any
//! Brownian path
//! ```text
//! mu(s)/mu(t) = exp(-E(s-t) - F^2 (s-t)/2 - F [W(s)-W(t)])
//! E[mu(s)]    = exp(-E s)
//! ```
//! All evaluations use exact exponentials of Brownian increments on the
//! grid; the SDE for `mu` is never discretized. Exponents are accumulated in
//! log space so long-horizon products cannot underflow.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, WlqError};

/// The pair `(E, F)` defining the weight process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    pub e: f64,
    pub f: f64,
}

impl WeightParams {
    pub fn new(e: f64, f: f64) -> Self {
        WeightParams { e, f }
    }
}

/// Log of the weight ratio `mu(s)/mu(t)` given `W(s) - W(t)`.
#[inline]
pub fn log_mu_ratio(s: f64, t: f64, w_increment: f64, params: &WeightParams) -> f64 {
    let dt = s - t;
    -params.e * dt - 0.5 * params.f * params.f * dt - params.f * w_increment
}

/// Exact weight ratio `mu(s)/mu(t) = exp(-E(s-t) - F^2(s-t)/2 - F [W(s)-W(t)])`.
///
/// Strictly positive for any finite inputs with `s >= t`.
#[inline]
pub fn mu_exact(s: f64, t: f64, w_increment: f64, params: &WeightParams) -> f64 {
    log_mu_ratio(s, t, w_increment, params).exp()
}

/// Mean weight ratio `E[mu(s)/mu(t)] = exp(-E(s-t))`.
#[inline]
pub fn mu_mean(s: f64, t: f64, params: &WeightParams) -> f64 {
    (-params.e * (s - t)).exp()
}

/// Exponent `nu(s,t) = -(2E+F^2)/4 (s-t) - F/2 [W(s)-W(t)]`, the log of
/// `sqrt(mu(s)/mu(t))`; satisfies `exp(2 nu) = mu_exact` pathwise.
#[inline]
pub fn nu_exponent(s: f64, t: f64, w_increment: f64, params: &WeightParams) -> f64 {
    let dt = s - t;
    -(2.0 * params.e + params.f * params.f) / 4.0 * dt - 0.5 * params.f * w_increment
}

/// Integrability diagnostic: `p2 > 1 + F^2/(2E)`, the exponent condition
/// under which `L^{p1,p2}` data yields a finite weighted integral.
pub fn check_exponent_condition(p2: f64, params: &WeightParams) -> Result<bool> {
    if params.e <= 0.0 {
        return Err(WlqError::NonpositiveE(params.e));
    }
    Ok(p2 > 1.0 + params.f * params.f / (2.0 * params.e))
}

/// A sampled Brownian path on a fixed time grid.
///
/// Construction is deterministic given `(seed, path_index)`: each path owns a
/// dedicated ChaCha stream, so ensembles can be generated concurrently in any
/// order with identical results at any worker count.
#[derive(Debug, Clone)]
pub struct BrownianGrid {
    pub t_grid: Vec<f64>,
    /// Brownian values with `w[0] = 0`.
    pub w: Vec<f64>,
}

impl BrownianGrid {
    /// Sample a path on `t_grid` (strictly increasing). Increments are
    /// `Normal(0, dt_k)`. `negate` flips every increment (antithetic pair).
    pub fn sample(t_grid: &[f64], seed: u64, path_index: u64, negate: bool) -> Result<Self> {
        if t_grid.len() < 2 {
            return Err(WlqError::GridMismatch(
                "time grid needs at least two points".into(),
            ));
        }
        if !t_grid.windows(2).all(|p| p[1] > p[0]) {
            return Err(WlqError::GridMismatch(
                "time grid must be strictly increasing".into(),
            ));
        }
        let mut rng = path_rng(seed, path_index);
        let mut w = Vec::with_capacity(t_grid.len());
        w.push(0.0);
        let sign = if negate { -1.0 } else { 1.0 };
        for k in 1..t_grid.len() {
            let dt = t_grid[k] - t_grid[k - 1];
            let z: f64 = StandardNormal.sample(&mut rng);
            w.push(w[k - 1] + sign * z * dt.sqrt());
        }
        Ok(BrownianGrid {
            t_grid: t_grid.to_vec(),
            w,
        })
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    /// Weight ratios `mu(t_k)/mu(t_0)` along the path.
    pub fn mu_ratios(&self, params: &WeightParams) -> Vec<f64> {
        let t0 = self.t_grid[0];
        self.t_grid
            .iter()
            .zip(&self.w)
            .map(|(&s, &w)| mu_exact(s, t0, w, params))
            .collect()
    }

    /// Exponents `nu(t_k, t_0)` along the path.
    pub fn nu_values(&self, params: &WeightParams) -> Vec<f64> {
        let t0 = self.t_grid[0];
        self.t_grid
            .iter()
            .zip(&self.w)
            .map(|(&s, &w)| nu_exponent(s, t0, w, params))
            .collect()
    }
}

/// Dedicated RNG stream for one path of one ensemble.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(path_index.wrapping_add(1));
    rng
}
