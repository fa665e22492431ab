//! Changepoint detection by launching a fresh sequential test at every start time.
//!
//! Test `k` sees the losses from index `k` on. The detector alarms at
//! `N* = min_k (N_k + k - 1)`, the first time any launched test rejects. Under
//! a null stream each test rejects with probability at most `delta`, so the
//! mean run length before a false alarm is at least `1 / delta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{ConfidenceSequence, SourceBound};
use crate::error::{check_unit, domain, Result};
use crate::scenario::{replicate_seeds, ScenarioConfig};
use crate::seqtest::{MonitorState, StoppingTime, TestSpec};

/// When new tests are launched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpawnPolicy {
    /// A new test at indices `1, 1 + s, 1 + 2s, ...`.
    Every(u64),
    /// Only the test started at index 1; identical to a single monitor.
    Once,
}

/// Optional heuristic: drop a test once another active test's lower bound has
/// been at least as high for `window` consecutive steps. Loses the guarantee
/// of the full construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pruning {
    pub window: u32,
}

/// Tests are updated in parallel once there are at least this many.
const PARALLEL_MIN_TESTS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ActiveTest {
    start: u64,
    monitor: MonitorState,
    dominated_for: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChangepointDetector {
    spec: TestSpec,
    source_bound: Option<SourceBound>,
    spawn: SpawnPolicy,
    pruning: Option<Pruning>,
    tests: Vec<ActiveTest>,
    t: u64,
    alarm: StoppingTime,
    max_active: usize,
}

impl ChangepointDetector {
    /// Every test shares the source bound computed once from `source_losses`.
    pub fn new(spec: TestSpec, source_losses: &[f64], spawn: SpawnPolicy) -> Result<Self> {
        let first = crate::seqtest::init_monitor(spec.clone(), source_losses)?;
        Self::from_source_bound(spec, first.source_bound().cloned(), spawn)
    }

    pub fn from_source_bound(
        spec: TestSpec,
        source_bound: Option<SourceBound>,
        spawn: SpawnPolicy,
    ) -> Result<Self> {
        if spawn == SpawnPolicy::Every(0) {
            return Err(domain("spawn stride must be at least 1"));
        }
        // validates the spec and source bound together
        MonitorState::with_source_bound(spec.clone(), source_bound.clone())?;
        Ok(Self {
            spec,
            source_bound,
            spawn,
            pruning: None,
            tests: Vec::new(),
            t: 0,
            alarm: StoppingTime::Never,
            max_active: 0,
        })
    }

    pub fn with_pruning(mut self, pruning: Pruning) -> Self {
        self.pruning = Some(pruning);
        self
    }

    fn spawns_at(&self, t: u64) -> bool {
        match self.spawn {
            SpawnPolicy::Once => t == 1,
            SpawnPolicy::Every(s) => (t - 1).is_multiple_of(s),
        }
    }

    /// Feeds one loss; returns the alarm time once raised. A no-op after the alarm.
    pub fn observe(&mut self, z: f64) -> Result<Option<u64>> {
        if let StoppingTime::At(n) = self.alarm {
            return Ok(Some(n));
        }
        check_unit(z, "loss")?;
        self.t += 1;
        if self.spawns_at(self.t) {
            let m = MonitorState::with_source_bound(self.spec.clone(), self.source_bound.clone())?;
            self.tests.push(ActiveTest {
                start: self.t,
                monitor: m,
                dominated_for: 0,
            });
        }
        self.max_active = self.max_active.max(self.tests.len());

        let step = |test: &mut ActiveTest| test.monitor.observe_one(z).map(|_| ());
        if self.tests.len() >= PARALLEL_MIN_TESTS {
            self.tests.par_iter_mut().try_for_each(step)?;
        } else {
            self.tests.iter_mut().try_for_each(step)?;
        }

        // all tests share this index, so any rejection now gives N* = t
        if self.tests.iter().any(|a| a.monitor.is_rejected()) {
            self.alarm = StoppingTime::At(self.t);
            return Ok(Some(self.t));
        }
        if let Some(p) = self.pruning {
            self.prune(p);
        }
        Ok(None)
    }

    fn prune(&mut self, p: Pruning) {
        if self.tests.len() < 2 {
            return;
        }
        let lows: Vec<f64> = self
            .tests
            .iter()
            .map(|a| a.monitor.target().raw_lower())
            .collect();
        // the most recently started test among those attaining the maximum is kept
        let best = lows
            .iter()
            .enumerate()
            .fold(0, |b, (i, &l)| if l >= lows[b] { i } else { b });
        for (i, a) in self.tests.iter_mut().enumerate() {
            if i != best && lows[best] >= lows[i] {
                a.dominated_for += 1;
            } else {
                a.dominated_for = 0;
            }
        }
        self.tests.retain(|a| a.dominated_for < p.window);
    }

    pub fn alarm_time(&self) -> StoppingTime {
        self.alarm
    }

    pub fn count(&self) -> u64 {
        self.t
    }

    pub fn active_tests(&self) -> usize {
        self.tests.len()
    }

    /// Largest number of simultaneously active tests so far.
    pub fn max_active_tests(&self) -> usize {
        self.max_active
    }

    /// Start indices of the active tests.
    pub fn test_starts(&self) -> impl Iterator<Item = u64> + '_ {
        self.tests.iter().map(|a| a.start)
    }
}

/// Result of one simulated stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u64,
    /// `None` for the null scenario.
    pub change_at: Option<u64>,
    pub alarm: Option<u64>,
    pub censored: bool,
    /// `(N* - (m - 1))+`, with `N*` replaced by the horizon when censored.
    pub delay: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub change_at: u64,
    pub mean_delay: f64,
    pub censored: usize,
    /// Runs that alarmed before the change.
    pub false_alarms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlAddReport {
    /// Mean alarm time under no change, censored runs counted at the horizon.
    pub mean_run_length_null: f64,
    pub null_censored: usize,
    pub null_alarms: usize,
    pub delay_estimates: Vec<DelayEstimate>,
    /// Worst mean delay over the supplied change locations.
    pub worst_mean_delay: Option<f64>,
    pub n_runs: usize,
    pub horizon: u64,
    pub runs: Vec<RunRecord>,
}

impl ArlAddReport {
    pub const CSV_HEADER: &'static str = "run,change_at,alarm,censored,delay";

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        fn opt(v: Option<u64>) -> String {
            v.map_or_else(String::new, |x| x.to_string())
        }
        self.runs.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.run,
                opt(r.change_at),
                opt(r.alarm),
                r.censored,
                opt(r.delay)
            )
        })
    }
}

/// Settings of an ARL/ADD simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlAddConfig {
    pub n_runs: usize,
    pub horizon: u64,
    pub change_locations: Vec<u64>,
    pub spawn: SpawnPolicy,
    pub seed: u64,
}

/// Simulates the detector on null streams (`pi1_before` throughout) and on
/// streams changing at each supplied location. Each run draws its own source
/// sample. Runs execute in parallel; results are ordered by (location, run).
pub fn estimate_arl_add(
    spec: &TestSpec,
    scenario: &ScenarioConfig,
    cfg: &ArlAddConfig,
) -> Result<ArlAddReport> {
    if cfg.n_runs == 0 {
        return Err(domain("n_runs must be at least 1"));
    }
    if cfg.horizon == 0 {
        return Err(domain("horizon must be at least 1"));
    }
    scenario.validate()?;
    let mut settings: Vec<Option<u64>> = vec![None];
    settings.extend(cfg.change_locations.iter().map(|&m| Some(m)));

    let jobs: Vec<(usize, Option<u64>, u64)> = settings
        .iter()
        .enumerate()
        .flat_map(|(si, &m)| (0..cfg.n_runs as u64).map(move |r| (si, m, r)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(si, change_at, run)| {
            let (s_seed, t_seed) = replicate_seeds(cfg.seed, si as u64, run);
            let source = scenario.source_losses(s_seed)?;
            let (target, _) = scenario.target_losses(cfg.horizon as usize, change_at, t_seed)?;
            let mut det = ChangepointDetector::new(spec.clone(), &source, cfg.spawn)?;
            let mut alarm = None;
            for &z in &target {
                if let Some(n) = det.observe(z)? {
                    alarm = Some(n);
                    break;
                }
            }
            let censored = alarm.is_none();
            let delay = change_at.map(|m| alarm.unwrap_or(cfg.horizon).saturating_sub(m - 1));
            Ok(RunRecord {
                run,
                change_at,
                alarm,
                censored,
                delay,
            })
        })
        .collect::<Result<_>>()?;

    let null: Vec<&RunRecord> = runs.iter().filter(|r| r.change_at.is_none()).collect();
    let mean_run_length_null = null
        .iter()
        .map(|r| r.alarm.unwrap_or(cfg.horizon) as f64)
        .sum::<f64>()
        / null.len() as f64;
    let delay_estimates: Vec<DelayEstimate> = cfg
        .change_locations
        .iter()
        .map(|&m| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.change_at == Some(m)).collect();
            DelayEstimate {
                change_at: m,
                mean_delay: rs.iter().map(|r| r.delay.unwrap_or(0) as f64).sum::<f64>()
                    / rs.len() as f64,
                censored: rs.iter().filter(|r| r.censored).count(),
                false_alarms: rs.iter().filter(|r| r.alarm.is_some_and(|a| a < m)).count(),
            }
        })
        .collect();
    Ok(ArlAddReport {
        mean_run_length_null,
        null_censored: null.iter().filter(|r| r.censored).count(),
        null_alarms: null.iter().filter(|r| !r.censored).count(),
        worst_mean_delay: delay_estimates
            .iter()
            .map(|d| d.mean_delay)
            .reduce(f64::max),
        delay_estimates,
        n_runs: cfg.n_runs,
        horizon: cfg.horizon,
        runs,
    })
}
