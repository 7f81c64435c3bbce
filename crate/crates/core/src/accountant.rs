//! Node-level Rényi-DP accounting for minibatch training over sampled subgraphs.
//!
//! A node occurs in at most `d = N(K, r)` training subgraphs. A uniform batch of
//! `m` out of `N` subgraphs contains `rho ~ Hypergeometric(N, d, m)` of them,
//! and one step of the Gaussian mechanism is `(alpha, gamma)`-RDP with
//!
//! ```text
//! gamma = ln E[exp(alpha (alpha - 1) * 2 rho^2 C^2 / sigma^2)] / (alpha - 1)
//! ```
//!
//! Everything is evaluated in log-space: at `rho = d` the exponent is large
//! for small noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ln_choose, log_sum_exp};
use crate::sampler::n_bound;

/// Inputs to the accountant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Number of training subgraphs.
    pub n: u64,
    pub k: u64,
    pub r: u32,
    /// Batch size.
    pub m: u64,
    /// Clipping threshold.
    pub c: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Iterations.
    pub t: u64,
    pub delta: f64,
    pub alpha_grid: Vec<f64>,
}

/// Smallest and largest noise multipliers [`calibrate_sigma`] searches.
pub const LAMBDA_RANGE: (f64, f64) = (1e-3, 1e6);

/// Rényi orders used when none are given.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![
        1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 32.0, 64.0,
    ];
    grid.extend((2..=64).map(f64::from));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

impl PrivacySpec {
    /// Spec parameterised by the noise multiplier, with `C = 1` and
    /// `sigma = lambda * 2 * N(K, r)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_lambda(n: u64, k: u64, r: u32, m: u64, lambda: f64, t: u64, delta: f64, alpha_grid: Vec<f64>) -> Result<Self> {
        let nb = n_bound(k, r)?;
        let spec = Self {
            n,
            k,
            r,
            m,
            c: 1.0,
            sigma: lambda * 2.0 * nb as f64,
            t,
            delta,
            alpha_grid,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n == 0 {
            return bad("number of training subgraphs must be >= 1".into());
        }
        if self.m == 0 || self.m > self.n {
            return bad(format!("batch size m={} must satisfy 1 <= m <= N={}", self.m, self.n));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive and finite, got {}", self.sigma));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("clipping threshold must be positive, got {}", self.c));
        }
        if self.t == 0 {
            return bad("iterations T must be >= 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha grid is empty".into());
        }
        if let Some(a) = self.alpha_grid.iter().find(|&&a| !(a > 1.0 && a.is_finite())) {
            return bad(format!("every alpha must be > 1, got {a}"));
        }
        n_bound(self.k, self.r)?;
        Ok(())
    }

    /// Maximum number of subgraphs one node can change, capped at `N`.
    pub fn occurrence_bound(&self) -> Result<u64> {
        Ok(n_bound(self.k, self.r)?.min(self.n))
    }

    /// `sigma / (2 C N(K, r))`.
    pub fn noise_multiplier(&self) -> Result<f64> {
        Ok(self.sigma / (2.0 * self.c * n_bound(self.k, self.r)? as f64))
    }
}

/// `ln P[rho = i]` for `rho ~ Hypergeometric(N, d, m)`; `-inf` outside the support.
pub fn hypergeom_log_pmf(n: u64, d: u64, m: u64, i: u64) -> Result<f64> {
    if d > n || m > n {
        return Err(Error::InvalidParameter(format!(
            "hypergeometric needs d <= N and m <= N, got N={n}, d={d}, m={m}"
        )));
    }
    let lo = (m + d).saturating_sub(n);
    let hi = d.min(m);
    if i < lo || i > hi {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(ln_choose(d, i) + ln_choose(n - d, m - i) - ln_choose(n, m))
}

/// Per-step RDP parameter at order `alpha`.
pub fn gamma_per_step(spec: &PrivacySpec, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be > 1, got {alpha}")));
    }
    let d = spec.occurrence_bound()?;
    let scale = alpha * (alpha - 1.0) * 2.0 * spec.c * spec.c / (spec.sigma * spec.sigma);
    let lo = (spec.m + d).saturating_sub(spec.n);
    let hi = d.min(spec.m);
    let terms = (lo..=hi)
        .map(|i| {
            let rho = i as f64;
            Ok(hypergeom_log_pmf(spec.n, d, spec.m, i)? + scale * rho * rho)
        })
        .collect::<Result<Vec<f64>>>()?;
    let gamma = log_sum_exp(&terms) / (alpha - 1.0);
    if !gamma.is_finite() {
        return Err(Error::BudgetOverflow { alpha });
    }
    // rounding can leave ln(sum of pmf) a hair below zero when noise dominates
    Ok(gamma.max(0.0))
}

/// RDP composition over `t` steps.
pub fn compose(gamma_step: f64, t: u64) -> f64 {
    gamma_step * t as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub gamma_step: f64,
    pub gamma_total: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantResult {
    /// One entry per order that did not overflow.
    pub per_alpha: Vec<AlphaPoint>,
    pub epsilon: f64,
    pub best_alpha: f64,
}

/// `epsilon(alpha) = gamma(alpha) T + ln(1/delta) / (alpha - 1)` over the grid,
/// minimised. Orders whose `gamma` overflows are skipped.
pub fn rdp_to_dp(spec: &PrivacySpec) -> Result<AccountantResult> {
    spec.validate()?;
    let log_inv_delta = (1.0 / spec.delta).ln();
    let mut per_alpha = Vec::with_capacity(spec.alpha_grid.len());
    for &alpha in &spec.alpha_grid {
        match gamma_per_step(spec, alpha) {
            Ok(gamma_step) => {
                let gamma_total = compose(gamma_step, spec.t);
                let epsilon = gamma_total + log_inv_delta / (alpha - 1.0);
                if epsilon.is_finite() {
                    per_alpha.push(AlphaPoint {
                        alpha,
                        gamma_step,
                        gamma_total,
                        epsilon,
                    });
                }
            }
            Err(Error::BudgetOverflow { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let best = per_alpha
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .copied()
        .ok_or(Error::BudgetOverflow {
            alpha: spec.alpha_grid[0],
        })?;
    Ok(AccountantResult {
        per_alpha,
        epsilon: best.epsilon,
        best_alpha: best.alpha,
    })
}

fn epsilon_at_lambda(spec: &PrivacySpec, lambda: f64) -> Result<f64> {
    let mut s = spec.clone();
    s.sigma = lambda * 2.0 * s.c * n_bound(s.k, s.r)? as f64;
    match rdp_to_dp(&s) {
        Ok(res) => Ok(res.epsilon),
        Err(Error::BudgetOverflow { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Noise standard deviation whose epsilon is within `1e-3` relative of
/// `target_epsilon`. The `sigma` already in `spec` is ignored.
///
/// Bisects on the noise multiplier in log-space over [`LAMBDA_RANGE`].
pub fn calibrate_sigma(spec: &PrivacySpec, target_epsilon: f64) -> Result<f64> {
    if !(target_epsilon > 0.0 && target_epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target epsilon must be positive, got {target_epsilon}"
        )));
    }
    let mut probe = spec.clone();
    probe.sigma = 1.0;
    probe.validate()?;
    let (lo_lambda, hi_lambda) = LAMBDA_RANGE;
    let unreachable = Error::TargetUnreachable {
        target: target_epsilon,
        lo: lo_lambda,
        hi: hi_lambda,
    };
    let tol = 1e-3 * target_epsilon;
    let sigma_of = |lambda: f64| -> Result<f64> { Ok(lambda * 2.0 * spec.c * n_bound(spec.k, spec.r)? as f64) };

    let eps_hi = epsilon_at_lambda(spec, hi_lambda)?;
    if eps_hi > target_epsilon + tol {
        return Err(unreachable);
    }
    if (eps_hi - target_epsilon).abs() <= tol {
        return sigma_of(hi_lambda);
    }
    let eps_lo = epsilon_at_lambda(spec, lo_lambda)?;
    if (eps_lo - target_epsilon).abs() <= tol {
        return sigma_of(lo_lambda);
    }
    if eps_lo < target_epsilon {
        return Err(unreachable);
    }
    // invariant: eps(lo) > target > eps(hi)
    let (mut lo, mut hi) = (lo_lambda.ln(), hi_lambda.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps = epsilon_at_lambda(spec, mid.exp())?;
        if (eps - target_epsilon).abs() <= tol {
            return sigma_of(mid.exp());
        }
        if eps > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(unreachable)
}
