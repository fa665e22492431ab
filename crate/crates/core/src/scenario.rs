//! Declarative synthetic experiments on the Gaussian label-shift setting.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::simgen::{
    analytic_target_misclassification_risk, bayes_losses, derive_seed, sample_drift,
    sample_label_shift, DriftSchedule, GaussianLabelShiftConfig,
};

/// How the target stream evolves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TargetStream {
    /// i.i.d. with a fixed class-1 marginal.
    Iid { pi1: f64 },
    /// Piecewise-constant marginal; the stream ends with the schedule.
    Drift { schedule: DriftSchedule },
    /// `pi1_before` until the change location, `pi1_after` from then on.
    Change { pi1_before: f64, pi1_after: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mu0: [f64; 2],
    pub mu1: [f64; 2],
    pub pi1_source: f64,
    pub n_source: usize,
    pub target: TargetStream,
}

impl ScenarioConfig {
    /// Means `(-1, 0)`, `(1, 0)`, 25% positives on a source sample of 1000.
    pub fn standard(target: TargetStream) -> Self {
        Self {
            mu0: [-1.0, 0.0],
            mu1: [1.0, 0.0],
            pi1_source: 0.25,
            n_source: 1000,
            target,
        }
    }

    pub fn gaussian(&self, pi1_target: f64) -> GaussianLabelShiftConfig {
        GaussianLabelShiftConfig {
            mu0: self.mu0,
            mu1: self.mu1,
            pi1_source: self.pi1_source,
            pi1_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussian(self.pi1_source).validate()?;
        if self.n_source == 0 {
            return Err(domain("n_source must be at least 1"));
        }
        match &self.target {
            TargetStream::Iid { pi1 } => self.gaussian(*pi1).validate(),
            TargetStream::Drift { schedule } => schedule.validate(),
            TargetStream::Change {
                pi1_before,
                pi1_after,
            } => {
                self.gaussian(*pi1_before).validate()?;
                self.gaussian(*pi1_after).validate()
            }
        }
    }

    /// Source-classifier losses on a fresh source sample.
    pub fn source_losses(&self, seed: u64) -> Result<Vec<f64>> {
        let cfg = self.gaussian(self.pi1_source);
        Ok(bayes_losses(
            &sample_label_shift(&cfg, self.n_source, seed)?,
            &cfg,
        ))
    }

    /// The schedule generating `len` target points, with an optional change
    /// at 1-based index `change_at` (ignored by non-change streams).
    pub fn target_schedule(&self, len: usize, change_at: Option<u64>) -> Result<DriftSchedule> {
        match &self.target {
            TargetStream::Iid { pi1 } => DriftSchedule::new(vec![(*pi1, len)]),
            TargetStream::Drift { schedule } => Ok(schedule.clone()),
            TargetStream::Change {
                pi1_before,
                pi1_after,
            } => {
                let before = match change_at {
                    None => len,
                    Some(m) => (m.max(1) as usize - 1).min(len),
                };
                let mut segs = vec![];
                if before > 0 {
                    segs.push((*pi1_before, before));
                }
                if len > before {
                    segs.push((*pi1_after, len - before));
                }
                DriftSchedule::new(segs)
            }
        }
    }

    /// Target losses and, per index, the analytic running risk.
    pub fn target_losses(
        &self,
        len: usize,
        change_at: Option<u64>,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let schedule = self.target_schedule(len, change_at)?;
        let cfg = self.gaussian(self.pi1_source);
        let samples = sample_drift(&schedule, &cfg, seed)?;
        let running = samples
            .iter()
            .map(|s| s.running_risk.unwrap_or(f64::NAN))
            .collect();
        Ok((bayes_losses(&samples, &cfg), running))
    }

    pub fn source_risk(&self) -> Result<f64> {
        analytic_target_misclassification_risk(&self.gaussian(self.pi1_source))
    }
}

/// Seeds of replicate `rep`: `(source, target)`.
pub fn replicate_seeds(base: u64, setting: u64, rep: u64) -> (u64, u64) {
    (
        derive_seed(base, &[setting, rep, 0]),
        derive_seed(base, &[setting, rep, 1]),
    )
}
