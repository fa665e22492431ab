//! Replication runners for the synthetic studies.
//!
//! Every runner derives per-replicate seeds from one base seed, runs the
//! replicates in parallel and returns results in a fixed order, so the output
//! does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    conformity_score_classification, BettingKind, CltBoundState, ConformalMartingaleState,
    Correction,
};
use crate::bounds::{BoundConfig, BoundMethod, BoundState, ConfidenceSequence, Side};
use crate::error::{domain, Result};
use crate::losses::LabelDistribution;
use crate::scenario::{replicate_seeds, ScenarioConfig, TargetStream};
use crate::seqtest::{init_monitor, Cadence, MonitorState, StoppingTime, TestSpec};
use crate::simgen::{
    analytic_target_misclassification_risk, bayes_posterior, derive_seed, fit_logistic, rng,
    sample_circle_shift, sample_drift, uniform_open, CircleShiftConfig, Domain, DriftSchedule,
    GaussianLabelShiftConfig,
};

/// Runs a monitor over `losses` in batches, returning its stopping time.
pub fn run_monitor(
    mut monitor: MonitorState,
    losses: &[f64],
    batch: usize,
) -> Result<StoppingTime> {
    for chunk in losses.chunks(batch.max(1)) {
        if monitor
            .observe(chunk)?
            .ne(&crate::seqtest::Decision::Continue)
        {
            break;
        }
    }
    Ok(monitor.stopping_time())
}

/// A named (source bound, target bound) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPair {
    pub name: String,
    pub source: BoundMethod,
    pub target: BoundMethod,
}

impl MethodPair {
    pub fn new(name: &str, source: BoundMethod, target: BoundMethod) -> Self {
        Self {
            name: name.into(),
            source,
            target,
        }
    }

    /// Hoeffding-style, PM-EB and betting pairs.
    pub fn standard_three() -> Vec<Self> {
        vec![
            Self::new(
                "hoeffding",
                BoundMethod::FixedHoeffding,
                BoundMethod::PmHoeffding,
            ),
            Self::new(
                "pm-eb",
                BoundMethod::PmEmpiricalBernstein,
                BoundMethod::PmEmpiricalBernstein,
            ),
            Self::new("betting", BoundMethod::Betting, BoundMethod::Betting),
        ]
    }
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Label-shift grid study: rejection rates and stopping times per target marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExperiment {
    pub scenario: ScenarioConfig,
    pub grid: Vec<f64>,
    pub reps: usize,
    pub max_target: usize,
    pub batch_size: usize,
    pub cadence: Cadence,
    pub eps_tol: f64,
    pub delta: f64,
    pub pairs: Vec<MethodPair>,
    pub seed: u64,
}

impl GridExperiment {
    /// 20 marginals in `[0.1, 0.9]`, 250 reps, batches of 50, up to 2000 target points.
    pub fn standard(seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig::standard(TargetStream::Iid { pi1: 0.25 }),
            grid: linspace(0.1, 0.9, 20),
            reps: 250,
            max_target: 2000,
            batch_size: 50,
            cadence: Cadence::EveryLoss,
            eps_tol: 0.05,
            delta: 0.05,
            pairs: MethodPair::standard_three(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub pi1_target: f64,
    pub method: String,
    pub target_risk: f64,
    pub harmful: bool,
    pub reps: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Mean stopping time with non-rejecting runs counted at `max_target`.
    pub mean_stopping_time: f64,
    /// Mean stopping time over rejecting runs only.
    pub mean_stopping_time_rejected: Option<f64>,
    /// Per-replicate stopping times (`None` = no rejection), in replicate order.
    pub stopping_times: Vec<Option<u64>>,
}

impl GridRow {
    pub const CSV_HEADER: &'static str =
        "pi1_target,method,target_risk,harmful,reps,rejections,rejection_rate,mean_stopping_time,mean_stopping_time_rejected";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.pi1_target,
            self.method,
            self.target_risk,
            self.harmful,
            self.reps,
            self.rejections,
            self.rejection_rate,
            self.mean_stopping_time,
            self.mean_stopping_time_rejected
                .map_or_else(String::new, |v| v.to_string())
        )
    }
}

fn spec_for(
    pair: &MethodPair,
    eps_tol: f64,
    delta: f64,
    batch: usize,
    cadence: Cadence,
) -> Result<TestSpec> {
    Ok(TestSpec::absolute(eps_tol, delta)?
        .with_methods(pair.source, pair.target)
        .with_batch_size(batch)
        .with_cadence(cadence))
}

/// Runs the grid. Replicate `r` uses the same source sample at every grid
/// point, and all method pairs see identical source and target streams.
pub fn label_shift_grid(exp: &GridExperiment) -> Result<Vec<GridRow>> {
    exp.scenario.validate()?;
    if exp.reps == 0 || exp.max_target == 0 {
        return Err(domain("reps and max_target must be positive"));
    }
    let specs: Vec<TestSpec> = exp
        .pairs
        .iter()
        .map(|p| spec_for(p, exp.eps_tol, exp.delta, exp.batch_size, exp.cadence))
        .collect::<Result<_>>()?;
    let source_risk = exp.scenario.source_risk()?;

    // times[rep][grid][pair]
    let times: Vec<Vec<Vec<Option<u64>>>> = (0..exp.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let (s_seed, _) = replicate_seeds(exp.seed, u64::MAX, rep);
            let source = exp.scenario.source_losses(s_seed)?;
            let monitors: Vec<MonitorState> = specs
                .iter()
                .map(|s| init_monitor(s.clone(), &source))
                .collect::<Result<_>>()?;
            exp.grid
                .iter()
                .enumerate()
                .map(|(gi, &pi)| {
                    let (_, t_seed) = replicate_seeds(exp.seed, gi as u64, rep);
                    let sc = ScenarioConfig {
                        target: TargetStream::Iid { pi1: pi },
                        ..exp.scenario.clone()
                    };
                    let (target, _) = sc.target_losses(exp.max_target, None, t_seed)?;
                    monitors
                        .iter()
                        .map(|m| Ok(run_monitor(m.clone(), &target, exp.batch_size)?.finite()))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (gi, &pi) in exp.grid.iter().enumerate() {
        let risk = analytic_target_misclassification_risk(&exp.scenario.gaussian(pi))?;
        for (pj, pair) in exp.pairs.iter().enumerate() {
            let st: Vec<Option<u64>> = times.iter().map(|r| r[gi][pj]).collect();
            let hits: Vec<u64> = st.iter().flatten().copied().collect();
            let cap = exp.max_target as u64;
            rows.push(GridRow {
                pi1_target: pi,
                method: pair.name.clone(),
                target_risk: risk,
                harmful: risk > source_risk + exp.eps_tol,
                reps: exp.reps,
                rejections: hits.len(),
                rejection_rate: hits.len() as f64 / exp.reps as f64,
                mean_stopping_time: st.iter().map(|s| s.unwrap_or(cap) as f64).sum::<f64>()
                    / exp.reps as f64,
                mean_stopping_time_rejected: (!hits.is_empty())
                    .then(|| hits.iter().sum::<u64>() as f64 / hits.len() as f64),
                stopping_times: st,
            });
        }
    }
    Ok(rows)
}

/// Fraction of i.i.d. streams on which a monitor ever rejects within `horizon`.
pub fn rejection_fraction(
    spec: &TestSpec,
    scenario: &ScenarioConfig,
    runs: usize,
    horizon: usize,
    seed: u64,
) -> Result<(usize, Vec<Option<u64>>)> {
    scenario.validate()?;
    let times: Vec<Option<u64>> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let (s_seed, t_seed) = replicate_seeds(seed, 0, r);
            let source = scenario.source_losses(s_seed)?;
            let (target, _) = scenario.target_losses(horizon, None, t_seed)?;
            let m = init_monitor(spec.clone(), &source)?;
            Ok(run_monitor(m, &target, horizon)?.finite())
        })
        .collect::<Result<_>>()?;
    Ok((times.iter().filter(|t| t.is_some()).count(), times))
}

/// Mean fixed-sample upper bound per sample size and method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsCompareRow {
    pub n: usize,
    pub method: BoundMethod,
    pub mean_upper: f64,
    pub mean_eps_appr: f64,
    pub reps: usize,
}

impl BoundsCompareRow {
    pub const CSV_HEADER: &'static str = "n,method,mean_upper,mean_eps_appr,reps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.n, self.method, self.mean_upper, self.mean_eps_appr, self.reps
        )
    }
}

/// Where the losses for a bound comparison come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossSource {
    /// Source-classifier 0-1 losses in a label-shift scenario.
    Scenario {
        scenario: ScenarioConfig,
    },
    Bernoulli {
        p: f64,
    },
}

impl LossSource {
    fn draw(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            LossSource::Scenario { scenario } => ScenarioConfig {
                n_source: n,
                ..scenario.clone()
            }
            .source_losses(seed),
            LossSource::Bernoulli { p } => {
                let mut r = rng(seed);
                Ok((0..n)
                    .map(|_| f64::from(uniform_open(&mut r) < *p))
                    .collect())
            }
        }
    }
}

/// Upper-side configurations for `methods` at a common `delta`.
pub fn upper_configs(methods: &[BoundMethod], delta: f64) -> Result<Vec<BoundConfig>> {
    methods
        .iter()
        .map(|&m| Ok(BoundConfig::new(m, delta)?.with_side(Side::Upper)))
        .collect()
}

/// Every configuration sees the same draws at a given `(n, rep)`.
pub fn bounds_compare(
    source: &LossSource,
    ns: &[usize],
    cfgs: &[BoundConfig],
    reps: usize,
    seed: u64,
) -> Result<Vec<BoundsCompareRow>> {
    if reps == 0 {
        return Err(domain("reps must be positive"));
    }
    let mut rows = Vec::new();
    for (ni, &n) in ns.iter().enumerate() {
        let per_rep: Vec<Vec<(f64, f64)>> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let losses = source.draw(n, derive_seed(seed, &[ni as u64, r]))?;
                cfgs.iter()
                    .map(|c| c.upper_bound(&losses).map(|b| (b.value, b.eps_appr)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (mi, c) in cfgs.iter().enumerate() {
            rows.push(BoundsCompareRow {
                n,
                method: c.method,
                mean_upper: per_rep.iter().map(|v| v[mi].0).sum::<f64>() / reps as f64,
                mean_eps_appr: per_rep.iter().map(|v| v[mi].1).sum::<f64>() / reps as f64,
                reps,
            });
        }
    }
    Ok(rows)
}

/// Running-risk monitoring under a drift schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftExperiment {
    pub scenario: ScenarioConfig,
    pub runs: usize,
    pub eps_tol: f64,
    pub delta: f64,
    pub source_method: BoundMethod,
    pub target_method: BoundMethod,
    pub seed: u64,
}

impl DriftExperiment {
    /// Marginal 0.25 to 0.85 in steps of 0.1 every 200 points, then held at
    /// 0.85 up to 10^4 points; CM-EB target.
    pub fn standard(seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig::standard(TargetStream::Drift {
                schedule: DriftSchedule::gradual_increase().held_to(10_000),
            }),
            runs: 200,
            eps_tol: 0.05,
            delta: 0.05,
            source_method: BoundMethod::Betting,
            target_method: BoundMethod::Cmeb,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRun {
    pub run: u64,
    pub stopping_time: Option<u64>,
    /// First time the target lower bound exceeded the analytic running risk.
    pub first_undercover: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub runs: Vec<DriftRun>,
    pub rejection_rate: f64,
    pub undercover_rate: f64,
    pub horizon: usize,
}

pub fn drift_experiment(exp: &DriftExperiment) -> Result<DriftSummary> {
    exp.scenario.validate()?;
    let spec = TestSpec::absolute(exp.eps_tol, exp.delta)?
        .with_methods(exp.source_method, exp.target_method);
    let len = match &exp.scenario.target {
        TargetStream::Drift { schedule } => schedule.len(),
        _ => return Err(domain("drift experiment needs a drift target")),
    };
    let runs: Vec<DriftRun> = (0..exp.runs as u64)
        .into_par_iter()
        .map(|r| {
            let (s_seed, t_seed) = replicate_seeds(exp.seed, 0, r);
            let source = exp.scenario.source_losses(s_seed)?;
            let (target, running) = exp.scenario.target_losses(len, None, t_seed)?;
            let mut monitor = init_monitor(spec.clone(), &source)?;
            // the bound keeps running after the alarm to check coverage over the whole horizon
            let mut cs: BoundState = spec.target.start()?;
            let mut first_undercover = None;
            for (i, (&z, &rt)) in target.iter().zip(&running).enumerate() {
                monitor.observe_one(z)?;
                cs.observe(z)?;
                if first_undercover.is_none() && cs.lower_exceeds(rt) {
                    first_undercover = Some(i as u64 + 1);
                }
            }
            Ok(DriftRun {
                run: r,
                stopping_time: monitor.stopping_time().finite(),
                first_undercover,
            })
        })
        .collect::<Result<_>>()?;
    let n = runs.len().max(1) as f64;
    Ok(DriftSummary {
        rejection_rate: runs.iter().filter(|r| r.stopping_time.is_some()).count() as f64 / n,
        undercover_rate: runs.iter().filter(|r| r.first_undercover.is_some()).count() as f64 / n,
        runs,
        horizon: len,
    })
}

/// CLT versus betting lower bounds on Bernoulli(p) streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltBettingConfig {
    pub p: f64,
    pub delta: f64,
    /// Sample sizes for the fixed-time study.
    pub fixed_sizes: Vec<u64>,
    pub fixed_draws: usize,
    pub runs: usize,
    pub horizon: u64,
    pub seed: u64,
}

impl CltBettingConfig {
    /// 100 log-spaced sizes in `[20, 1000]` with 100 draws each; 1000 continuous runs to 1000.
    pub fn standard(seed: u64) -> Self {
        let sizes = (0..100)
            .map(|i| {
                (20f64.ln() + (1000f64.ln() - 20f64.ln()) * i as f64 / 99.0)
                    .exp()
                    .round() as u64
            })
            .collect();
        Self {
            p: 0.6,
            delta: 0.1,
            fixed_sizes: sizes,
            fixed_draws: 100,
            runs: 1000,
            horizon: 1000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTimeRow {
    pub t: u64,
    pub clt_miscoverage: f64,
    pub betting_miscoverage: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub t: u64,
    pub clt_cumulative: f64,
    pub betting_cumulative: f64,
    /// Mean lower bounds across runs.
    pub betting_mean_lower: f64,
    pub clt_poly_step_mean_lower: f64,
    /// Only defined at multiples of 25.
    pub clt_power_25_mean_lower: Option<f64>,
    pub clt_poly_25_mean_lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltBettingResult {
    pub fixed: Vec<FixedTimeRow>,
    pub cumulative: Vec<CumulativeRow>,
}

fn bernoulli_stream(p: f64, n: u64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| f64::from(uniform_open(&mut r) < p))
        .collect()
}

fn betting_lower_cs(delta: f64) -> Result<BoundState> {
    BoundConfig::new(BoundMethod::Betting, delta)?
        .with_side(Side::Lower)
        .start()
}

pub fn clt_vs_betting_experiment(cfg: &CltBettingConfig) -> Result<CltBettingResult> {
    crate::error::check_open_unit(cfg.p, "p")?;
    let fixed: Vec<FixedTimeRow> = cfg
        .fixed_sizes
        .iter()
        .enumerate()
        .map(|(si, &t)| {
            let misses: Vec<(bool, bool)> = (0..cfg.fixed_draws as u64)
                .into_par_iter()
                .map(|d| {
                    let xs = bernoulli_stream(cfg.p, t, derive_seed(cfg.seed, &[0, si as u64, d]));
                    let mut clt = CltBoundState::new(cfg.delta, Correction::None)?;
                    let mut bet = betting_lower_cs(cfg.delta)?;
                    for &z in &xs {
                        clt.observe(z)?;
                        bet.observe(z)?;
                    }
                    Ok((clt.evaluate() > cfg.p, bet.raw_lower() > cfg.p))
                })
                .collect::<Result<_>>()?;
            let n = misses.len() as f64;
            Ok(FixedTimeRow {
                t,
                clt_miscoverage: misses.iter().filter(|m| m.0).count() as f64 / n,
                betting_miscoverage: misses.iter().filter(|m| m.1).count() as f64 / n,
                draws: misses.len(),
            })
        })
        .collect::<Result<_>>()?;

    struct RunTrace {
        clt_first_miss: Option<u64>,
        bet_first_miss: Option<u64>,
        bet_lower: Vec<f64>,
        poly_step: Vec<f64>,
        power_25: Vec<f64>,
        poly_25: Vec<f64>,
    }
    let h = cfg.horizon;
    let traces: Vec<RunTrace> = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| {
            let xs = bernoulli_stream(cfg.p, h, derive_seed(cfg.seed, &[1, r]));
            let mut clt = CltBoundState::new(cfg.delta, Correction::None)?;
            let mut poly_step = CltBoundState::new(cfg.delta, Correction::PolynomialBonferroni)?;
            let mut power_25 = CltBoundState::new(cfg.delta, Correction::PowerBonferroni)?;
            let mut poly_25 = CltBoundState::new(cfg.delta, Correction::PolynomialBonferroni)?;
            let mut bet = betting_lower_cs(cfg.delta)?;
            let mut tr = RunTrace {
                clt_first_miss: None,
                bet_first_miss: None,
                bet_lower: Vec::with_capacity(h as usize),
                poly_step: Vec::with_capacity(h as usize),
                power_25: vec![],
                poly_25: vec![],
            };
            for (i, &z) in xs.iter().enumerate() {
                let t = i as u64 + 1;
                for s in [&mut clt, &mut poly_step, &mut power_25, &mut poly_25] {
                    s.observe(z)?;
                }
                bet.observe(z)?;
                if clt.evaluate() > cfg.p && tr.clt_first_miss.is_none() {
                    tr.clt_first_miss = Some(t);
                }
                let bl = bet.raw_lower();
                if bl > cfg.p && tr.bet_first_miss.is_none() {
                    tr.bet_first_miss = Some(t);
                }
                tr.bet_lower.push(bl.max(0.0));
                tr.poly_step.push(poly_step.evaluate().max(0.0));
                if t.is_multiple_of(25) {
                    tr.power_25.push(power_25.evaluate().max(0.0));
                    tr.poly_25.push(poly_25.evaluate().max(0.0));
                }
            }
            Ok(tr)
        })
        .collect::<Result<_>>()?;

    let n = traces.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RunTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    let cumulative = (1..=h)
        .map(|t| {
            let k = t as usize - 1;
            let batch = (t % 25 == 0).then(|| t as usize / 25 - 1);
            CumulativeRow {
                t,
                clt_cumulative: traces
                    .iter()
                    .filter(|r| r.clt_first_miss.is_some_and(|m| m <= t))
                    .count() as f64
                    / n,
                betting_cumulative: traces
                    .iter()
                    .filter(|r| r.bet_first_miss.is_some_and(|m| m <= t))
                    .count() as f64
                    / n,
                betting_mean_lower: mean(&|r| r.bet_lower[k]),
                clt_poly_step_mean_lower: mean(&|r| r.poly_step[k]),
                clt_power_25_mean_lower: batch.map(|b| mean(&|r| r.power_25[b])),
                clt_poly_25_mean_lower: batch.map(|b| mean(&|r| r.poly_25[b])),
            }
        })
        .collect();
    Ok(CltBettingResult { fixed, cumulative })
}

/// The five label-shift settings for conformal test martingales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConformalSetting {
    /// Marginal 0.75 from the start.
    ColdStart,
    /// 100 points at 0.25, then 0.75.
    WarmStart,
    /// 0.1 to 0.45 in steps of 0.05 every 75 points.
    SlowBenign,
    /// 0.5 to 0.85 in steps of 0.05 every 75 points.
    SlowHarmful,
    /// 0.1 to 0.9 in steps of 0.2 every 150 points.
    Sharp,
}

impl ConformalSetting {
    pub const ALL: [ConformalSetting; 5] = [
        ConformalSetting::ColdStart,
        ConformalSetting::WarmStart,
        ConformalSetting::SlowBenign,
        ConformalSetting::SlowHarmful,
        ConformalSetting::Sharp,
    ];

    /// Target schedule; shift settings run for `shift_len` points.
    pub fn schedule(self, shift_len: usize) -> Result<DriftSchedule> {
        match self {
            ConformalSetting::ColdStart => DriftSchedule::new(vec![(0.75, shift_len)]),
            ConformalSetting::WarmStart => DriftSchedule::new(vec![
                (0.25, 100),
                (0.75, shift_len.saturating_sub(100).max(1)),
            ]),
            ConformalSetting::SlowBenign => DriftSchedule::stepped(0.1, 0.45, 0.05, 75),
            ConformalSetting::SlowHarmful => DriftSchedule::stepped(0.5, 0.85, 0.05, 75),
            ConformalSetting::Sharp => DriftSchedule::stepped(0.1, 0.9, 0.2, 150),
        }
    }
}

impl std::str::FromStr for ConformalSetting {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cold-start" | "cold" => Ok(Self::ColdStart),
            "warm-start" | "warm" => Ok(Self::WarmStart),
            "slow-benign" => Ok(Self::SlowBenign),
            "slow-harmful" => Ok(Self::SlowHarmful),
            "sharp" => Ok(Self::Sharp),
            other => Err(domain(format!("unknown conformal setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub setting: ConformalSetting,
    pub kind: BettingKind,
    pub runs: usize,
    /// Stream length for the shift settings.
    pub shift_len: usize,
    pub alpha: f64,
    pub pi1_source: f64,
    pub seed: u64,
}

impl ConformalConfig {
    pub fn standard(setting: ConformalSetting, seed: u64) -> Self {
        Self {
            setting,
            kind: BettingKind::SimpleMixture,
            runs: 50,
            shift_len: 2000,
            alpha: 0.05,
            pi1_source: 0.25,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalRun {
    pub run: u64,
    pub log_wealth: Vec<f64>,
    /// First `n` with `S_n >= 1/alpha`.
    pub crossing: Option<u64>,
}

/// Conformal test martingales on the source Bayes classifier's posteriors.
pub fn conformal_experiment(cfg: &ConformalConfig) -> Result<Vec<ConformalRun>> {
    let schedule = cfg.setting.schedule(cfg.shift_len)?;
    let base = GaussianLabelShiftConfig {
        pi1_source: cfg.pi1_source,
        ..GaussianLabelShiftConfig::standard(0.5)
    };
    let level = (1.0 / cfg.alpha).ln();
    (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| {
            let samples = sample_drift(&schedule, &base, derive_seed(cfg.seed, &[0, r]))?;
            let mut mart = ConformalMartingaleState::new(cfg.kind, derive_seed(cfg.seed, &[1, r]))?;
            let mut log_wealth = Vec::with_capacity(samples.len());
            let mut crossing = None;
            for s in &samples {
                let f = LabelDistribution::binary(bayes_posterior(s.x, &base))?;
                let score = conformity_score_classification(&f, s.y)?;
                mart.observe_score(score)?;
                let lw = mart.log_wealth();
                if crossing.is_none() && lw >= level {
                    crossing = Some(s.t);
                }
                log_wealth.push(lw);
            }
            Ok(ConformalRun {
                run: r,
                log_wealth,
                crossing,
            })
        })
        .collect()
}

/// Harmful covariate shift on circle data with a fitted linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateShiftExperiment {
    pub circle: CircleShiftConfig,
    pub n_train: usize,
    pub n_source: usize,
    pub max_target: usize,
    pub runs: usize,
    pub eps_tol: f64,
    pub delta: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl CovariateShiftExperiment {
    /// 200 training points, 100 source points, betting source bound, CM-EB target.
    pub fn standard(seed: u64) -> Self {
        Self {
            circle: CircleShiftConfig::default(),
            n_train: 200,
            n_source: 100,
            max_target: 2000,
            runs: 100,
            eps_tol: 0.1,
            delta: 0.05,
            ridge: 1e-3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRun {
    pub run: u64,
    pub source_upper: f64,
    pub target_error: f64,
    pub stopping_time: Option<u64>,
}

pub fn covariate_shift_experiment(exp: &CovariateShiftExperiment) -> Result<Vec<CovariateRun>> {
    let spec = TestSpec::absolute(exp.eps_tol, exp.delta)?
        .with_methods(BoundMethod::Betting, BoundMethod::Cmeb);
    (0..exp.runs as u64)
        .into_par_iter()
        .map(|r| {
            let train = sample_circle_shift(
                &exp.circle,
                Domain::Source,
                exp.n_train,
                derive_seed(exp.seed, &[r, 0]),
            )?;
            let clf = fit_logistic(&train, exp.ridge)?;
            let src = sample_circle_shift(
                &exp.circle,
                Domain::Source,
                exp.n_source,
                derive_seed(exp.seed, &[r, 1]),
            )?;
            let tgt = sample_circle_shift(
                &exp.circle,
                Domain::Target,
                exp.max_target,
                derive_seed(exp.seed, &[r, 2]),
            )?;
            let source_losses = clf.losses(&src);
            let target_losses = clf.losses(&tgt);
            let monitor = init_monitor(spec.clone(), &source_losses)?;
            let source_upper = monitor.source_bound().map_or(f64::NAN, |b| b.value);
            Ok(CovariateRun {
                run: r,
                source_upper,
                target_error: target_losses.iter().sum::<f64>() / target_losses.len() as f64,
                stopping_time: run_monitor(monitor, &target_losses, 1)?.finite(),
            })
        })
        .collect()
}

/// Median of the values with `None` treated as `+inf`.
pub fn median_stopping_time(times: &[Option<u64>]) -> Option<f64> {
    if times.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = times
        .iter()
        .map(|t| t.map_or(f64::INFINITY, |x| x as f64))
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
