use serde::{Deserialize, Serialize};

use super::ConfidenceSequence;
use crate::error::{check_open_unit, check_unit, domain, Result};

/// `(-log(1 - lambda) - lambda) / 4` for `lambda` in `[0, 1)`.
pub fn psi_e(lambda: f64) -> f64 {
    (-(-lambda).ln_1p() - lambda) / 4.0
}

/// Predictably-mixed empirical-Bernstein confidence sequence.
///
/// Variance and mean estimates are regularized toward `1/4` and `1/2`:
/// `mu_t = (1/2 + sum z) / (t + 1)`, `sigma2_t = (1/4 + sum (z_i - mu_i)^2) / (t + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmEbState {
    delta: f64,
    c_cap: f64,
    horizon: Option<u64>,
    t: u64,
    sum_lambda: f64,
    sum_lambda_z: f64,
    sum_v_psi: f64,
    sum_z: f64,
    sum_sq_dev: f64,
    mu_hat: f64,
    sigma2_hat: f64,
}

impl PmEbState {
    pub fn new(delta: f64, c_cap: f64, horizon: Option<u64>) -> Result<Self> {
        check_open_unit(delta, "delta")?;
        check_open_unit(c_cap, "c_cap")?;
        if horizon == Some(0) {
            return Err(domain("horizon must be at least 1"));
        }
        Ok(Self {
            delta,
            c_cap,
            horizon,
            t: 0,
            sum_lambda: 0.0,
            sum_lambda_z: 0.0,
            sum_v_psi: 0.0,
            sum_z: 0.0,
            sum_sq_dev: 0.0,
            mu_hat: 0.5,
            sigma2_hat: 0.25,
        })
    }

    pub fn mu_hat(&self) -> f64 {
        self.mu_hat
    }

    pub fn sigma2_hat(&self) -> f64 {
        self.sigma2_hat
    }

    /// Bet size for the next observation, from the variance estimate so far.
    pub fn next_lambda(&self) -> f64 {
        let log_inv = (1.0 / self.delta).ln();
        let raw = match self.horizon {
            Some(n) => (2.0 * log_inv / (n as f64 * self.sigma2_hat)).sqrt(),
            None => {
                let t = (self.t + 1) as f64;
                (2.0 * log_inv / (self.sigma2_hat * t * (1.0 + t).ln())).sqrt()
            }
        };
        raw.min(self.c_cap)
    }

    pub fn radius(&self) -> f64 {
        if self.t == 0 {
            return f64::INFINITY;
        }
        ((1.0 / self.delta).ln() + self.sum_v_psi) / self.sum_lambda
    }

    fn weighted_mean(&self) -> f64 {
        self.sum_lambda_z / self.sum_lambda
    }
}

impl ConfidenceSequence for PmEbState {
    fn observe(&mut self, z: f64) -> Result<()> {
        check_unit(z, "loss")?;
        let lambda = self.next_lambda();
        let dev = z - self.mu_hat;
        let v = 4.0 * dev * dev;
        self.t += 1;
        self.sum_lambda += lambda;
        self.sum_lambda_z += lambda * z;
        self.sum_v_psi += v * psi_e(lambda);

        let t = self.t as f64;
        self.sum_z += z;
        self.mu_hat = (0.5 + self.sum_z) / (t + 1.0);
        let d = z - self.mu_hat;
        self.sum_sq_dev += d * d;
        self.sigma2_hat = (0.25 + self.sum_sq_dev) / (t + 1.0);
        Ok(())
    }

    fn count(&self) -> u64 {
        self.t
    }

    fn raw_lower(&self) -> f64 {
        if self.t == 0 {
            return f64::NEG_INFINITY;
        }
        self.weighted_mean() - self.radius()
    }

    fn raw_upper(&self) -> f64 {
        if self.t == 0 {
            return f64::INFINITY;
        }
        self.weighted_mean() + self.radius()
    }
}
