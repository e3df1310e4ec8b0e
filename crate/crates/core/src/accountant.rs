//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Every discriminator step is one invocation of the mechanism with sampling
//! rate `q` and noise multiplier `sigma`. RDP composes additively, so after `T`
//! steps the curve is `T * eps(alpha)`, which is converted to `(eps, delta)`
//! and minimized over a grid of orders.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const LN_2: f64 = core::f64::consts::LN_2;

/// Orders used by default: `1.1, 1.2, ..., 10.9`, every integer `2..=128`,
/// and `160, 192, 224, 256`.
pub fn default_orders() -> Vec<f64> {
    let mut v: Vec<f64> = (1..100).map(|x| 1.0 + x as f64 / 10.0).filter(|a| libm::fmod(*a, 1.0) != 0.0).collect();
    v.extend((2..=128).map(|a| a as f64));
    v.extend([160.0, 192.0, 224.0, 256.0]);
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite orders"));
    v
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + libm::log1p(libm::exp(-(a - b).abs()))
}

/// `log(exp(a) - exp(b))`; `None` when `b > a`.
#[inline]
fn log_sub(a: f64, b: f64) -> Option<f64> {
    if b == f64::NEG_INFINITY {
        return Some(a);
    }
    if a < b {
        return None;
    }
    if a == b {
        return Some(f64::NEG_INFINITY);
    }
    Some(a + libm::log1p(-libm::exp(b - a)))
}

/// `log(erfc(x))`, accurate far into the tail where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return libm::log(libm::erfc(x));
    }
    let inv = 1.0 / (x * x);
    // erfc(x) ~ exp(-x^2) / (x sqrt(pi)) * (1 - 1/(2x^2) + 3/(4x^4) - 15/(8x^6) + 105/(16x^8))
    let series = 1.0 - 0.5 * inv + 0.75 * inv * inv - 1.875 * inv * inv * inv + 6.5625 * inv * inv * inv * inv;
    -x * x - libm::log(x) - 0.5 * libm::log(core::f64::consts::PI) + libm::log(series)
}

/// `log A_alpha` for integer alpha: the binomial expansion of the Rényi moment.
fn log_a_int(q: f64, sigma: f64, alpha: u32) -> f64 {
    let (lq, l1q) = (libm::log(q), libm::log1p(-q));
    let a = alpha as f64;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            log_binom += libm::log((a - kf + 1.0) / kf);
        }
        let qk = if k == 0 { 0.0 } else { kf * lq };
        let q1k = if k == alpha { 0.0 } else { (a - kf) * l1q };
        let term = log_binom + qk + q1k + kf * (kf - 1.0) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// `log A_alpha` for fractional alpha, via the two-sided erfc series.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> Option<f64> {
    let (lq, l1q) = (libm::log(q), libm::log1p(-q));
    let s2 = sigma * sigma;
    let z0 = s2 * libm::log(1.0 / q - 1.0) + 0.5;
    let (mut la0, mut la1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut log_coef, mut coef_positive) = (0.0f64, true);
    for i in 0..20_000u32 {
        let fi = i as f64;
        if i > 0 {
            // binom(alpha, i) = binom(alpha, i-1) * (alpha - i + 1) / i
            let r = (alpha - fi + 1.0) / fi;
            log_coef += libm::log(r.abs());
            if r < 0.0 {
                coef_positive = !coef_positive;
            }
        }
        let j = alpha - fi;
        let lt0 = log_coef + fi * lq + j * l1q;
        let lt1 = log_coef + j * lq + fi * l1q;
        let le0 = -LN_2 + log_erfc((fi - z0) / (core::f64::consts::SQRT_2 * sigma));
        let le1 = -LN_2 + log_erfc((z0 - j) / (core::f64::consts::SQRT_2 * sigma));
        let ls0 = lt0 + (fi * fi - fi) / (2.0 * s2) + le0;
        let ls1 = lt1 + (j * j - j) / (2.0 * s2) + le1;
        if coef_positive {
            la0 = log_add(la0, ls0);
            la1 = log_add(la1, ls1);
        } else {
            la0 = log_sub(la0, ls0)?;
            la1 = log_sub(la1, ls1)?;
        }
        if ls0.max(ls1) < -30.0 {
            return Some(log_add(la0, la1));
        }
    }
    None
}

/// Per-step RDP of the subsampled Gaussian mechanism at order `alpha > 1`.
///
/// Integer orders use the exact binomial sum
/// `eps(alpha) = log(sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2))) / (alpha-1)`,
/// evaluated with log-sum-exp. Returns an accounting error when the order
/// is numerically unavailable.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Accounting(format!("sampling rate {q} outside (0, 1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Accounting(format!("noise multiplier {sigma} must be positive")));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Accounting(format!("order {alpha} must exceed 1")));
    }
    let eps = if q == 1.0 {
        alpha / (2.0 * sigma * sigma)
    } else if libm::fmod(alpha, 1.0) == 0.0 && alpha <= u32::MAX as f64 {
        log_a_int(q, sigma, alpha as u32) / (alpha - 1.0)
    } else {
        log_a_frac(q, sigma, alpha).ok_or_else(|| Error::Accounting(format!("order {alpha} unavailable")))? / (alpha - 1.0)
    };
    if !eps.is_finite() {
        return Err(Error::Accounting(format!("order {alpha} unavailable")));
    }
    Ok(eps.max(0.0))
}

/// Per-step RDP over a grid of orders. Orders that fail numerically are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps_per_step: Vec<f64>,
}

/// `(eps, delta)` conversion result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonReport {
    pub epsilon: f64,
    /// Minimizing order; `None` when no mechanism was invoked.
    pub order: Option<f64>,
}

impl RdpCurve {
    pub fn new(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        let mut kept = Vec::with_capacity(orders.len());
        let mut eps = Vec::with_capacity(orders.len());
        for &a in orders {
            match rdp_subsampled_gaussian(q, sigma, a) {
                Ok(e) => {
                    kept.push(a);
                    eps.push(e);
                }
                Err(Error::Accounting(_)) if a > 1.0 && q > 0.0 && q <= 1.0 && sigma > 0.0 => {}
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(Error::Accounting("no usable order in the grid".into()));
        }
        Ok(RdpCurve { orders: kept, eps_per_step: eps })
    }

    pub fn with_default_orders(q: f64, sigma: f64) -> Result<Self> {
        Self::new(q, sigma, &default_orders())
    }

    /// Best `eps` after `steps` compositions at failure probability `delta`.
    ///
    /// Uses `eps = T rdp(a) + log((a-1)/a) - (log delta + log a) / (a-1)`,
    /// minimized over the retained orders and floored at zero.
    pub fn epsilon(&self, steps: u64, delta: f64) -> Result<EpsilonReport> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Accounting(format!("delta {delta} outside (0, 1)")));
        }
        if steps == 0 {
            return Ok(EpsilonReport { epsilon: 0.0, order: None });
        }
        let t = steps as f64;
        let ld = libm::log(delta);
        let mut best = EpsilonReport { epsilon: f64::INFINITY, order: None };
        for (&a, &e) in self.orders.iter().zip(&self.eps_per_step) {
            let eps = t * e + libm::log((a - 1.0) / a) - (ld + libm::log(a)) / (a - 1.0);
            if eps.is_finite() && eps < best.epsilon {
                best = EpsilonReport { epsilon: eps, order: Some(a) };
            }
        }
        if best.order.is_none() {
            return Err(Error::Accounting("every order overflowed".into()));
        }
        best.epsilon = best.epsilon.max(0.0);
        Ok(best)
    }
}

/// Inputs of a forward budget query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetQuery {
    /// Number of discriminator steps.
    pub steps: u64,
    pub q: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// Privacy spent after `query.steps` discriminator steps.
pub fn epsilon_after(query: &BudgetQuery) -> Result<EpsilonReport> {
    if query.steps == 0 {
        if !(query.delta > 0.0 && query.delta < 1.0) {
            return Err(Error::Accounting(format!("delta {} outside (0, 1)", query.delta)));
        }
        return Ok(EpsilonReport { epsilon: 0.0, order: None });
    }
    RdpCurve::with_default_orders(query.q, query.sigma)?.epsilon(query.steps, query.delta)
}

/// Largest `T` with `epsilon_after(T) <= eps_target`.
pub fn max_steps(q: f64, sigma: f64, delta: f64, eps_target: f64) -> Result<u64> {
    if !(eps_target > 0.0) {
        return Err(Error::Calibration(format!("target epsilon {eps_target} must be positive")));
    }
    let curve = RdpCurve::with_default_orders(q, sigma)?;
    let fits = |t: u64| -> Result<bool> { Ok(curve.epsilon(t, delta)?.epsilon <= eps_target) };
    if !fits(1)? {
        return Err(Error::Calibration(format!("epsilon {eps_target} is exceeded by a single step")));
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while fits(hi)? {
        lo = hi;
        hi = hi.checked_mul(2).ok_or_else(|| Error::Calibration("step budget does not saturate".into()))?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Grid resolution of [`calibrate_sigma`].
pub const SIGMA_RESOLUTION: f64 = 1e-3;
const SIGMA_MAX: f64 = 1e4;

/// Smallest `sigma` on a `1e-3` grid with `epsilon_after(T) <= eps_target`.
pub fn calibrate_sigma(q: f64, steps: u64, delta: f64, eps_target: f64) -> Result<f64> {
    if !(eps_target > 0.0) {
        return Err(Error::Calibration(format!("target epsilon {eps_target} must be positive")));
    }
    if steps == 0 {
        return Err(Error::Calibration("need at least one step".into()));
    }
    let sigma_of = |m: u64| m as f64 * SIGMA_RESOLUTION;
    let fits = |m: u64| -> Result<bool> {
        match RdpCurve::with_default_orders(q, sigma_of(m)) {
            Ok(c) => Ok(c.epsilon(steps, delta)?.epsilon <= eps_target),
            Err(Error::Accounting(_)) => Ok(false),
            Err(e) => Err(e),
        }
    };
    let top = (SIGMA_MAX / SIGMA_RESOLUTION) as u64;
    if !fits(top)? {
        return Err(Error::Calibration(format!("no sigma up to {SIGMA_MAX} reaches epsilon {eps_target}")));
    }
    if fits(1)? {
        return Ok(sigma_of(1));
    }
    // invariant: fits(hi) && !fits(lo)
    let (mut lo, mut hi) = (1u64, top);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(sigma_of(hi))
}
