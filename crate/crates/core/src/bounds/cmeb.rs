//! Conjugate-mixture empirical-Bernstein confidence sequence for running means.
//!
//! The boundary `u(v)` is the root in `s` of `m(s, v) = 1/alpha`, where `m` is
//! the gamma-exponential mixture of the sub-exponential supermartingale with
//! scale `c = 1`:
//!
//! ```text
//! log m(s, v) = rho log rho - lnGamma(rho) - ln P(rho, rho)
//!             + lnGamma(v + rho) + ln P(v + rho, s + v + rho)
//!             - (v + rho) ln(s + v + rho) + s + v
//! ```
//!
//! with `P` the regularized lower incomplete gamma function. `m` is increasing
//! in `s` and `m(0, v) <= 1`, so bisection on `s` finds the root.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use super::ConfidenceSequence;
use crate::error::{check_open_unit, check_unit, domain, Error, Result};

const MAX_BISECTIONS: usize = 200;
const BISECTION_TOL: f64 = 1e-10;

/// `rho` that makes the mixture tightest near intrinsic time `v_opt` at level `alpha`.
pub fn cmeb_best_rho(v_opt: f64, alpha: f64) -> f64 {
    let l = 2.0 * (1.0 / alpha).ln();
    v_opt / (l + (1.0 + l).ln())
}

/// `log m(s, v)` for the gamma-exponential mixture with unit scale.
pub fn cmeb_log_mixture(s: f64, v: f64, rho: f64) -> f64 {
    let lead = rho * rho.ln() - ln_gamma(rho) - gamma_lr(rho, rho).ln();
    let a = v + rho;
    let x = s + v + rho;
    lead + ln_gamma(a) + gamma_lr(a, x).ln() - a * x.ln() + s + v
}

/// Gamma-exponential uniform boundary `u(v)` with crossing probability `alpha`.
pub fn cmeb_boundary(v: f64, alpha: f64, rho: f64) -> Result<f64> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(domain(format!(
            "intrinsic time must be finite and nonnegative, got {v}"
        )));
    }
    check_open_unit(alpha, "alpha")?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(domain(format!("rho must be positive, got {rho}")));
    }
    let target = (1.0 / alpha).ln();
    let f = |s: f64| cmeb_log_mixture(s, v, rho) - target;

    let mut lo = 0.0;
    let mut hi = 1.0f64.max(v.sqrt());
    let mut iterations = 0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        iterations += 1;
        if iterations > MAX_BISECTIONS || !hi.is_finite() {
            return Err(Error::Numeric(
                "could not bracket the CM-EB boundary".into(),
            ));
        }
    }
    while hi - lo > BISECTION_TOL * hi.max(1.0) {
        iterations += 1;
        if iterations > MAX_BISECTIONS {
            return Err(Error::Numeric(format!(
                "CM-EB bisection did not converge (v = {v}, alpha = {alpha})"
            )));
        }
        let mid = 0.5 * (lo + hi);
        let val = f(mid);
        if val.is_nan() {
            return Err(Error::Numeric(format!(
                "CM-EB mixture is NaN at s = {mid}, v = {v}"
            )));
        }
        if val < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// CM-EB confidence sequence for `t^-1 sum E[Z_i | past]`, valid without a common mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmebState {
    /// Crossing probability per side.
    alpha: f64,
    rho: f64,
    t: u64,
    sum_z: f64,
    /// `sum (Z_i - Zhat_i)^2`.
    v_total: f64,
    /// Predictable center: mean of the observations so far, 1/2 before any.
    z_hat: f64,
}

impl CmebState {
    pub fn new(alpha: f64, rho: f64) -> Result<Self> {
        check_open_unit(alpha, "alpha")?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(domain(format!("rho must be positive, got {rho}")));
        }
        Ok(Self {
            alpha,
            rho,
            t: 0,
            sum_z: 0.0,
            v_total: 0.0,
            z_hat: 0.5,
        })
    }

    pub fn mean(&self) -> f64 {
        self.sum_z / self.t as f64
    }

    pub fn variance_process(&self) -> f64 {
        self.v_total
    }

    pub fn z_hat(&self) -> f64 {
        self.z_hat
    }

    /// `u(V_t) / t`.
    pub fn radius(&self) -> Result<f64> {
        if self.t == 0 {
            return Ok(f64::INFINITY);
        }
        Ok(cmeb_boundary(self.v_total, self.alpha, self.rho)? / self.t as f64)
    }

    pub fn try_raw_lower(&self) -> Result<f64> {
        if self.t == 0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.mean() - self.radius()?)
    }

    pub fn try_raw_upper(&self) -> Result<f64> {
        if self.t == 0 {
            return Ok(f64::INFINITY);
        }
        Ok(self.mean() + self.radius()?)
    }
}

impl ConfidenceSequence for CmebState {
    fn observe(&mut self, z: f64) -> Result<()> {
        check_unit(z, "loss")?;
        let d = z - self.z_hat;
        self.v_total += d * d;
        self.t += 1;
        self.sum_z += z;
        self.z_hat = self.sum_z / self.t as f64;
        Ok(())
    }

    fn count(&self) -> u64 {
        self.t
    }

    /// Falls back to the vacuous `-inf` if the boundary solver fails.
    fn raw_lower(&self) -> f64 {
        self.try_raw_lower().unwrap_or(f64::NEG_INFINITY)
    }

    fn raw_upper(&self) -> f64 {
        self.try_raw_upper().unwrap_or(f64::INFINITY)
    }

    /// One mixture evaluation: `mean - u/t > x` iff `m(t (mean - x), V_t) > 1/alpha`.
    fn lower_exceeds(&self, x: f64) -> bool {
        if self.t == 0 {
            return false;
        }
        let s = self.t as f64 * (self.mean() - x);
        if s <= 0.0 {
            return false;
        }
        cmeb_log_mixture(s, self.v_total, self.rho) > (1.0 / self.alpha).ln()
    }
}
