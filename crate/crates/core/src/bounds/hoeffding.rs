use serde::{Deserialize, Serialize};

use super::{hoeffding_radius, BoundMethod, ConfidenceSequence, SourceBound};
use crate::error::{check_open_unit, check_unit, domain, Result};

/// Classic one-sided Hoeffding upper bound `mean + sqrt(log(1/delta) / 2n)`.
pub fn hoeffding_fixed_upper(losses: &[f64], delta: f64) -> Result<SourceBound> {
    check_open_unit(delta, "delta")?;
    if losses.is_empty() {
        return Err(domain("Hoeffding bound needs a nonempty sample"));
    }
    for &z in losses {
        check_unit(z, "loss")?;
    }
    let n = losses.len();
    let mean = losses.iter().sum::<f64>() / n as f64;
    let eps = hoeffding_radius(n, delta);
    Ok(SourceBound {
        value: mean + eps,
        empirical_mean: mean,
        eps_appr: eps,
        n_source: n,
        method: BoundMethod::FixedHoeffding,
        delta_s: delta,
    })
}

/// Predictable bet size `min(sqrt(8 log(1/delta) / (t log(t+1))), 1)`.
pub fn pmh_lambda(t: u64, delta: f64) -> f64 {
    debug_assert!(t >= 1);
    let t = t as f64;
    (8.0 * (1.0 / delta).ln() / (t * (t + 1.0).ln()))
        .sqrt()
        .min(1.0)
}

fn psi_h(lambda: f64) -> f64 {
    lambda * lambda / 8.0
}

/// Predictably-mixed Hoeffding confidence sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmHoeffdingState {
    delta: f64,
    t: u64,
    sum_lambda: f64,
    sum_lambda_z: f64,
    sum_psi: f64,
}

impl PmHoeffdingState {
    pub fn new(delta: f64) -> Result<Self> {
        check_open_unit(delta, "delta")?;
        Ok(Self {
            delta,
            t: 0,
            sum_lambda: 0.0,
            sum_lambda_z: 0.0,
            sum_psi: 0.0,
        })
    }

    /// Weighted mean `sum(lambda_i z_i) / sum(lambda_i)`.
    pub fn weighted_mean(&self) -> f64 {
        self.sum_lambda_z / self.sum_lambda
    }

    pub fn radius(&self) -> f64 {
        if self.t == 0 || self.sum_lambda <= 0.0 {
            return f64::INFINITY;
        }
        ((1.0 / self.delta).ln() + self.sum_psi) / self.sum_lambda
    }
}

impl ConfidenceSequence for PmHoeffdingState {
    fn observe(&mut self, z: f64) -> Result<()> {
        check_unit(z, "loss")?;
        self.t += 1;
        let lambda = pmh_lambda(self.t, self.delta);
        self.sum_lambda += lambda;
        self.sum_lambda_z += lambda * z;
        self.sum_psi += psi_h(lambda);
        Ok(())
    }

    fn count(&self) -> u64 {
        self.t
    }

    fn raw_lower(&self) -> f64 {
        if self.t == 0 || self.sum_lambda <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.weighted_mean() - self.radius()
    }

    fn raw_upper(&self) -> f64 {
        if self.t == 0 || self.sum_lambda <= 0.0 {
            return f64::INFINITY;
        }
        self.weighted_mean() + self.radius()
    }
}
