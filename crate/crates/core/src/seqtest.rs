//! Sequential test for a harmful increase of the target risk.
//!
//! The source risk is bounded once from a holdout sample; target losses then
//! stream into a confidence sequence and the null is rejected the first time
//! its lower endpoint strictly exceeds the threshold. With budgets
//! `delta_source + delta_target = delta` the chance of ever rejecting a true
//! null is at most `delta`, however long the monitor runs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundConfig, BoundMethod, BoundState, ConfidenceSequence, Side, SourceBound};
use crate::error::{check_unit, domain, Error, Result};

/// Version tag of serialized monitors.
pub const MONITOR_FORMAT_VERSION: u32 = 1;
const MONITOR_FORMAT: &str = "riskmon.monitor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMode {
    /// Null: target risk at most source risk plus `eps_tol`.
    AbsoluteIncrease,
    /// Null: target risk at most `(1 + eps_tol)` times the source risk.
    RelativeIncrease,
    /// Alarm once the target risk exceeds the constant `eps_tol`.
    FixedThreshold,
}

impl std::str::FromStr for TestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" | "absolute" => Ok(TestMode::AbsoluteIncrease),
            "rel" | "relative" => Ok(TestMode::RelativeIncrease),
            "fixed" | "threshold" => Ok(TestMode::FixedThreshold),
            other => Err(domain(format!("unknown test mode {other:?}"))),
        }
    }
}

/// When the threshold comparison happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cadence {
    EveryLoss,
    /// Only after each complete batch of `batch_size` losses.
    BatchEnd,
}

/// The pair of hypotheses a monitor tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hypothesis {
    /// Target losses are i.i.d. with a fixed risk.
    IidRisk,
    /// The target may drift; the running risk is tested at every time.
    RunningRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub mode: TestMode,
    /// Tolerance, or the fixed threshold `r0` in [`TestMode::FixedThreshold`].
    pub eps_tol: f64,
    pub delta: f64,
    pub delta_source: f64,
    pub delta_target: f64,
    /// Source bound configuration; its `delta` and `side` are set from the spec.
    pub source: BoundConfig,
    /// Target bound configuration; its `delta` and `side` are set from the spec.
    pub target: BoundConfig,
    pub batch_size: usize,
    pub cadence: Cadence,
}

impl TestSpec {
    /// Absolute-increase test with an even budget split and betting bounds on both sides.
    pub fn absolute(eps_tol: f64, delta: f64) -> Result<Self> {
        Self::build(TestMode::AbsoluteIncrease, eps_tol, delta)
    }

    pub fn relative(eps_tol: f64, delta: f64) -> Result<Self> {
        Self::build(TestMode::RelativeIncrease, eps_tol, delta)
    }

    /// Alarm when the target risk exceeds `r0`; the whole budget goes to the target.
    pub fn fixed_threshold(r0: f64, delta: f64) -> Result<Self> {
        Self::build(TestMode::FixedThreshold, r0, delta)
    }

    fn build(mode: TestMode, eps_tol: f64, delta: f64) -> Result<Self> {
        let (ds, dt) = match mode {
            TestMode::FixedThreshold => (0.0, delta),
            _ => (delta / 2.0, delta / 2.0),
        };
        let mut spec = Self {
            mode,
            eps_tol,
            delta,
            delta_source: ds,
            delta_target: dt,
            source: BoundConfig::new(BoundMethod::Betting, if ds > 0.0 { ds } else { 0.5 })?,
            target: BoundConfig::new(BoundMethod::Betting, dt)?,
            batch_size: 1,
            cadence: Cadence::EveryLoss,
        };
        spec.sync();
        spec.validate()?;
        Ok(spec)
    }

    /// Copies the split budgets into the bound configs and fixes their sides.
    fn sync(&mut self) {
        self.source.side = Side::Upper;
        self.target.side = Side::Lower;
        if self.delta_source > 0.0 {
            self.source.delta = self.delta_source;
        }
        self.target.delta = self.delta_target;
    }

    pub fn with_methods(mut self, source: BoundMethod, target: BoundMethod) -> Self {
        self.source.method = source;
        self.target.method = target;
        self
    }

    pub fn with_source_config(mut self, cfg: BoundConfig) -> Self {
        self.source = cfg;
        self.sync();
        self
    }

    pub fn with_target_config(mut self, cfg: BoundConfig) -> Self {
        self.target = cfg;
        self.sync();
        self
    }

    /// Custom budget split; must add up to `delta`.
    pub fn with_split(mut self, delta_source: f64, delta_target: f64) -> Result<Self> {
        self.delta_source = delta_source;
        self.delta_target = delta_target;
        self.sync();
        self.validate()?;
        Ok(self)
    }

    pub fn with_batch_size(mut self, m: usize) -> Self {
        self.batch_size = m;
        self
    }

    pub fn with_cadence(mut self, cadence: Cadence) -> Self {
        self.cadence = cadence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        crate::error::check_open_unit(self.delta, "delta")?;
        if !(self.eps_tol >= 0.0 && self.eps_tol.is_finite()) {
            return Err(domain(format!(
                "eps_tol must be finite and nonnegative, got {}",
                self.eps_tol
            )));
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be at least 1"));
        }
        match self.mode {
            TestMode::FixedThreshold => {
                if self.eps_tol > 1.0 {
                    return Err(domain("fixed threshold must lie in [0, 1]"));
                }
                if self.delta_source != 0.0 || self.delta_target != self.delta {
                    return Err(domain(
                        "fixed-threshold tests spend the whole budget on the target",
                    ));
                }
            }
            _ => {
                if !(self.delta_source > 0.0 && self.delta_target > 0.0)
                    || (self.delta_source + self.delta_target - self.delta).abs() > 1e-12
                {
                    return Err(domain(format!(
                        "budget split ({}, {}) must be positive and sum to delta = {}",
                        self.delta_source, self.delta_target, self.delta
                    )));
                }
                self.source.validate()?;
            }
        }
        if !self.target.method.is_time_uniform() {
            return Err(domain("the target bound must be a confidence sequence"));
        }
        self.target.validate()
    }

    /// Rejection threshold for a given source upper bound.
    pub fn threshold(&self, source_upper: Option<f64>) -> Result<f64> {
        match (self.mode, source_upper) {
            (TestMode::FixedThreshold, _) => Ok(self.eps_tol),
            (TestMode::AbsoluteIncrease, Some(u)) => Ok(u + self.eps_tol),
            (TestMode::RelativeIncrease, Some(u)) => Ok((1.0 + self.eps_tol) * u),
            (_, None) => Err(domain("this test mode needs a source bound")),
        }
    }

    pub fn hypothesis(&self) -> Hypothesis {
        if self.target.method.allows_drift() {
            Hypothesis::RunningRisk
        } else {
            Hypothesis::IidRisk
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Decision {
    Continue,
    Reject { at: u64 },
}

/// First crossing time, or `Never` while the null stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingTime {
    At(u64),
    Never,
}

impl StoppingTime {
    pub fn finite(self) -> Option<u64> {
        match self {
            StoppingTime::At(n) => Some(n),
            StoppingTime::Never => None,
        }
    }

    /// The stopping time, or `cap` when censored.
    pub fn censored_at(self, cap: u64) -> u64 {
        self.finite().map_or(cap, |n| n.min(cap))
    }
}

impl std::fmt::Display for StoppingTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoppingTime::At(n) => write!(f, "{n}"),
            StoppingTime::Never => f.write_str("inf"),
        }
    }
}

/// One threshold comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub t: u64,
    pub lower: f64,
    pub threshold: f64,
    pub decision: Decision,
}

impl Evaluation {
    pub const CSV_HEADER: &'static str = "t,L_target,threshold,decision";

    pub fn csv_row(&self) -> String {
        let d = match self.decision {
            Decision::Continue => "continue",
            Decision::Reject { .. } => "reject",
        };
        format!("{},{},{},{}", self.t, self.lower, self.threshold, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    spec: TestSpec,
    source_bound: Option<SourceBound>,
    threshold: f64,
    target: BoundState,
    t: u64,
    since_eval: usize,
    decision: Decision,
    hypothesis: Hypothesis,
    trace_capacity: usize,
    trace: VecDeque<(u64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct MonitorDocument {
    format: String,
    version: u32,
    monitor: MonitorState,
}

/// Bounds the source risk and starts an empty target sequence.
pub fn init_monitor(spec: TestSpec, source_losses: &[f64]) -> Result<MonitorState> {
    spec.validate()?;
    let source_bound = match spec.mode {
        TestMode::FixedThreshold => None,
        _ => {
            if source_losses.is_empty() {
                return Err(domain("the source sample is empty"));
            }
            Some(spec.source.upper_bound(source_losses)?)
        }
    };
    MonitorState::with_source_bound(spec, source_bound)
}

impl MonitorState {
    /// Starts a monitor from an already computed source bound.
    pub fn with_source_bound(spec: TestSpec, source_bound: Option<SourceBound>) -> Result<Self> {
        spec.validate()?;
        let threshold = spec.threshold(source_bound.as_ref().map(|b| b.value))?;
        Ok(Self {
            target: spec.target.start()?,
            hypothesis: spec.hypothesis(),
            spec,
            source_bound,
            threshold,
            t: 0,
            since_eval: 0,
            decision: Decision::Continue,
            trace_capacity: 0,
            trace: VecDeque::new(),
        })
    }

    /// Keeps the latest `capacity` evaluated `(t, lower)` pairs.
    pub fn with_trace(mut self, capacity: usize) -> Self {
        self.trace_capacity = capacity;
        self
    }

    /// Feeds a batch. The whole batch is validated first so a bad value leaves
    /// the state untouched. After rejection this is a no-op.
    pub fn observe(&mut self, losses: &[f64]) -> Result<Decision> {
        self.observe_inner(losses, None)
    }

    /// Like [`observe`](Self::observe), reporting every evaluation to `log`.
    pub fn observe_with(
        &mut self,
        losses: &[f64],
        mut log: impl FnMut(Evaluation),
    ) -> Result<Decision> {
        self.observe_inner(losses, Some(&mut log))
    }

    fn observe_inner(
        &mut self,
        losses: &[f64],
        mut log: Option<&mut dyn FnMut(Evaluation)>,
    ) -> Result<Decision> {
        if self.is_rejected() {
            return Ok(self.decision);
        }
        for &z in losses {
            check_unit(z, "loss")?;
        }
        let want_lower = self.trace_capacity > 0 || log.is_some();
        for &z in losses {
            self.target.observe(z)?;
            self.t += 1;
            self.since_eval += 1;
            let due = match self.spec.cadence {
                Cadence::EveryLoss => true,
                Cadence::BatchEnd => self.since_eval >= self.spec.batch_size,
            };
            if !due {
                continue;
            }
            self.since_eval = 0;
            let crossed = self.target.lower_exceeds(self.threshold);
            if crossed {
                self.decision = Decision::Reject { at: self.t };
            }
            if want_lower {
                let lower = self.target.lower();
                if self.trace_capacity > 0 {
                    if self.trace.len() == self.trace_capacity {
                        self.trace.pop_front();
                    }
                    self.trace.push_back((self.t, lower));
                }
                if let Some(log) = log.as_mut() {
                    log(Evaluation {
                        t: self.t,
                        lower,
                        threshold: self.threshold,
                        decision: self.decision,
                    });
                }
            }
            if crossed {
                break;
            }
        }
        Ok(self.decision)
    }

    /// Feeds losses without reporting, returning the decision.
    pub fn observe_one(&mut self, z: f64) -> Result<Decision> {
        self.observe(std::slice::from_ref(&z))
    }

    pub fn stopping_time(&self) -> StoppingTime {
        match self.decision {
            Decision::Continue => StoppingTime::Never,
            Decision::Reject { at } => StoppingTime::At(at),
        }
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self.decision, Decision::Reject { .. })
    }

    pub fn spec(&self) -> &TestSpec {
        &self.spec
    }

    pub fn source_bound(&self) -> Option<&SourceBound> {
        self.source_bound.as_ref()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn hypothesis(&self) -> Hypothesis {
        self.hypothesis
    }

    pub fn count(&self) -> u64 {
        self.t
    }

    pub fn target(&self) -> &BoundState {
        &self.target
    }

    /// Current target lower bound, clamped to `[0, 1]`.
    pub fn target_lower(&self) -> f64 {
        self.target.lower()
    }

    pub fn trace(&self) -> impl Iterator<Item = &(u64, f64)> {
        self.trace.iter()
    }

    /// Versioned JSON checkpoint; floats round-trip exactly.
    pub fn to_document(&self) -> Result<String> {
        let doc = MonitorDocument {
            format: MONITOR_FORMAT.into(),
            version: MONITOR_FORMAT_VERSION,
            monitor: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: MonitorDocument =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != MONITOR_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format {:?}",
                doc.format
            )));
        }
        if doc.version != MONITOR_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported monitor version {}",
                doc.version
            )));
        }
        doc.monitor
            .spec
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(doc.monitor)
    }
}
