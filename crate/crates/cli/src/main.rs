//! `riskmon`: monitor loss streams for harmful risk increases and run the
//! synthetic studies.
//!
//! Exit status: 0 when a run completes without alarm, 2 when `monitor`
//! raises an alarm, 1 on any error.

mod input;
mod output;

use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use riskmon::baselines::BettingKind;
use riskmon::bounds::BoundMethod;
use riskmon::changepoint::{estimate_arl_add, ArlAddConfig, RunRecord, SpawnPolicy};
use riskmon::experiments::{
    bounds_compare, clt_vs_betting_experiment, conformal_experiment, drift_experiment,
    label_shift_grid, linspace, upper_configs, BoundsCompareRow, CltBettingConfig, ConformalConfig,
    ConformalSetting, CumulativeRow, DriftExperiment, FixedTimeRow, GridExperiment, GridRow,
    LossSource, MethodPair,
};
use riskmon::scenario::{ScenarioConfig, TargetStream};
use riskmon::seqtest::{
    init_monitor, Cadence, Decision, Evaluation, MonitorState, TestMode, TestSpec,
};
use riskmon::simgen::{sample_label_shift, DriftSchedule};
use serde::Serialize;

use output::OutputArgs;

const EXIT_ALARM: u8 = 2;

#[derive(Parser)]
#[command(
    name = "riskmon",
    version,
    about = "Sequential monitoring of harmful risk increases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monitor a loss stream and alarm on a harmful increase.
    Monitor(MonitorArgs),
    /// Run label-shift simulations or export a synthetic stream.
    Simulate(SimulateArgs),
    /// Mean fixed-sample upper bounds per sample size and method.
    BoundsCompare(BoundsCompareArgs),
    /// CLT and conformal-martingale baselines.
    Baseline(BaselineArgs),
    /// Average run length and detection delay of the changepoint detector.
    Changepoint(ChangepointArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CadenceArg {
    EveryLoss,
    BatchEnd,
}

impl From<CadenceArg> for Cadence {
    fn from(c: CadenceArg) -> Self {
        match c {
            CadenceArg::EveryLoss => Cadence::EveryLoss,
            CadenceArg::BatchEnd => Cadence::BatchEnd,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct TestArgs {
    /// Overall error budget, split evenly between source and target.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    eps_tol: f64,
    /// abs, rel or fixed.
    #[arg(long, default_value = "abs")]
    mode: TestMode,
    /// Risk threshold for `--mode fixed`.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value = "betting")]
    source_method: BoundMethod,
    #[arg(long, default_value = "betting")]
    target_method: BoundMethod,
    #[arg(long, value_enum, default_value_t = CadenceArg::EveryLoss)]
    cadence: CadenceArg,
}

impl TestArgs {
    fn spec(&self, batch_size: usize) -> Result<TestSpec> {
        let spec = match self.mode {
            TestMode::AbsoluteIncrease => TestSpec::absolute(self.eps_tol, self.delta)?,
            TestMode::RelativeIncrease => TestSpec::relative(self.eps_tol, self.delta)?,
            TestMode::FixedThreshold => {
                let r0 = self.threshold.context("--mode fixed needs --threshold")?;
                TestSpec::fixed_threshold(r0, self.delta)?
            }
        };
        let spec = spec
            .with_methods(self.source_method, self.target_method)
            .with_batch_size(batch_size)
            .with_cadence(self.cadence.into());
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 0.25)]
    pi1_source: f64,
    /// Source holdout size.
    #[arg(long, default_value_t = 1000)]
    n_source: usize,
}

impl ScenarioArgs {
    fn scenario(&self, target: TargetStream) -> Result<ScenarioConfig> {
        let sc = ScenarioConfig {
            pi1_source: self.pi1_source,
            n_source: self.n_source,
            ..ScenarioConfig::standard(target)
        };
        sc.validate()?;
        Ok(sc)
    }
}

#[derive(Debug, Args, Serialize)]
struct MonitorArgs {
    /// Loss stream; `-` reads stdin.
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// Source holdout losses (same record formats as the input).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Resume from this file if it exists and save the state to it at the end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Class count for point and set predictions.
    #[arg(long, default_value_t = 2)]
    num_classes: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[command(flatten)]
    test: TestArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SimKind {
    /// Rejection rates and stopping times over a grid of target marginals.
    Grid,
    /// Running-risk monitoring under a gradual drift.
    Drift,
    /// Export one labelled target stream as JSONL.
    Stream,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = SimKind::Grid)]
    kind: SimKind,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    reps: usize,
    #[arg(long, default_value_t = 0.1)]
    grid_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    grid_hi: f64,
    #[arg(long, default_value_t = 20)]
    grid_points: usize,
    /// Target samples per replicate (grid) or schedule horizon (drift).
    #[arg(long)]
    max_target: Option<usize>,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    /// Compare one source/target pair instead of the three standard ones.
    #[arg(long)]
    single_pair: bool,
    /// Target marginal for `--kind stream`.
    #[arg(long, default_value_t = 0.75)]
    pi1_target: f64,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    test: TestArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct BoundsCompareArgs {
    #[arg(long)]
    seed: u64,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "50,100,200,500,1000,2000"
    )]
    ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "hoeffding,pm-eb,betting")]
    methods: Vec<BoundMethod>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Candidate-mean spacing of the betting bound.
    #[arg(long, default_value_t = 1e-3)]
    grid_resolution: f64,
    /// Draw Bernoulli(p) losses instead of label-shift source losses.
    #[arg(long)]
    bernoulli: Option<f64>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BaselineKind {
    /// Fixed-time miscoverage of CLT and betting lower bounds.
    CltFixed,
    /// Cumulative miscoverage and mean lower bounds under continuous monitoring.
    CltCumulative,
    /// Conformal test martingale log-wealth trajectories.
    Conformal,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BetArg {
    Mixture,
    Simple,
}

#[derive(Debug, Args, Serialize)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    experiment: BaselineKind,
    #[arg(long)]
    seed: u64,
    /// Runs (continuous monitoring and conformal) or draws per size (fixed-time).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    p: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    horizon: u64,
    #[arg(long, default_value = "cold-start")]
    setting: ConformalSetting,
    #[arg(long, value_enum, default_value_t = BetArg::Mixture)]
    betting: BetArg,
    /// Exponent of the simple bet.
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
struct ChangepointArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 2000)]
    horizon: u64,
    /// 1-based change locations; the null runs are always included.
    #[arg(long, value_delimiter = ',')]
    change_at: Vec<u64>,
    /// Start a new test every `stride` points.
    #[arg(long, default_value_t = 1)]
    stride: u64,
    /// Start a single test at time 1 instead.
    #[arg(long)]
    once: bool,
    #[arg(long, default_value_t = 0.25)]
    pi1_before: f64,
    #[arg(long, default_value_t = 0.8)]
    pi1_after: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    test: TestArgs,
    #[command(flatten)]
    #[serde(skip)]
    output: OutputArgs,
}

fn open_input(path: &Path) -> Result<Box<dyn io::BufRead>> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdin().lock()))
    } else {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn save_checkpoint(path: &Path, monitor: &MonitorState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, monitor.to_document()?)
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_or_start(args: &MonitorArgs) -> Result<MonitorState> {
    if let Some(cp) = args.checkpoint.as_deref().filter(|p| p.exists()) {
        let text = fs::read_to_string(cp).with_context(|| format!("reading {}", cp.display()))?;
        return MonitorState::from_document(&text)
            .with_context(|| format!("loading {}", cp.display()));
    }
    let spec = args.test.spec(args.batch_size)?;
    let source = match (&args.source, spec.mode) {
        (_, TestMode::FixedThreshold) => Vec::new(),
        (Some(p), _) => input::read_all(open_input(p)?, args.num_classes)
            .with_context(|| format!("in {}", p.display()))?,
        (None, _) => bail!("--source is required unless --mode fixed"),
    };
    Ok(init_monitor(spec, &source)?)
}

fn cmd_monitor(args: &MonitorArgs) -> Result<ExitCode> {
    let mut monitor = load_or_start(args)?;
    let mut sink = args.output.open("monitor", args, None)?;
    sink.header(Evaluation::CSV_HEADER)?;
    let batch = monitor.spec().batch_size.max(1);
    let mut pending = Vec::with_capacity(batch);
    let feed =
        |monitor: &mut MonitorState, chunk: &[f64], sink: &mut output::Sink| -> Result<Decision> {
            let mut result = Ok(());
            let d = monitor.observe_with(chunk, |e| {
                if result.is_ok() {
                    result = sink.row(|| e.csv_row(), &e);
                }
            })?;
            result.map(|_| d)
        };
    if !monitor.is_rejected() {
        for z in input::losses(open_input(&args.input)?, args.num_classes) {
            pending.push(z?);
            if pending.len() == batch {
                let d = feed(&mut monitor, &pending, &mut sink)?;
                pending.clear();
                if d != Decision::Continue {
                    break;
                }
            }
        }
        if !pending.is_empty() {
            feed(&mut monitor, &pending, &mut sink)?;
        }
    }
    sink.finish()?;
    if let Some(cp) = &args.checkpoint {
        save_checkpoint(cp, &monitor)?;
    }
    match monitor.decision() {
        Decision::Reject { at } => {
            eprintln!(
                "alarm: harmful increase detected at t={at} (threshold {})",
                monitor.threshold()
            );
            Ok(ExitCode::from(EXIT_ALARM))
        }
        Decision::Continue => {
            eprintln!("no alarm after {} losses", monitor.count());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<ExitCode> {
    let mut sink = args.output.open("simulate", args, Some(args.seed))?;
    match args.kind {
        SimKind::Grid => {
            let mut exp = GridExperiment::standard(args.seed);
            exp.scenario = args.scenario.scenario(TargetStream::Iid { pi1: 0.5 })?;
            exp.grid = linspace(args.grid_lo, args.grid_hi, args.grid_points);
            exp.reps = args.reps;
            exp.max_target = args.max_target.unwrap_or(exp.max_target);
            exp.batch_size = args.batch_size;
            exp.cadence = args.test.cadence.into();
            exp.eps_tol = args.test.eps_tol;
            exp.delta = args.test.delta;
            if args.test.mode != TestMode::AbsoluteIncrease {
                bail!("simulate --kind grid runs the absolute-increase test");
            }
            if args.single_pair {
                exp.pairs = vec![MethodPair::new(
                    args.test.target_method.name(),
                    args.test.source_method,
                    args.test.target_method,
                )];
            }
            sink.header(GridRow::CSV_HEADER)?;
            for row in label_shift_grid(&exp)? {
                sink.row(|| row.csv_row(), &row)?;
            }
        }
        SimKind::Drift => {
            let mut exp = DriftExperiment::standard(args.seed);
            let horizon = args.max_target.unwrap_or(10_000);
            exp.scenario = args.scenario.scenario(TargetStream::Drift {
                schedule: DriftSchedule::gradual_increase().held_to(horizon),
            })?;
            exp.runs = args.reps;
            exp.eps_tol = args.test.eps_tol;
            exp.delta = args.test.delta;
            exp.source_method = args.test.source_method;
            exp.target_method = args.test.target_method;
            let summary = drift_experiment(&exp)?;
            sink.header("run,stopping_time,first_undercover")?;
            let opt = |v: Option<u64>| v.map_or_else(String::new, |x| x.to_string());
            for r in &summary.runs {
                sink.row(
                    || {
                        format!(
                            "{},{},{}",
                            r.run,
                            opt(r.stopping_time),
                            opt(r.first_undercover)
                        )
                    },
                    r,
                )?;
            }
            eprintln!(
                "rejection rate {:.3}, under-coverage rate {:.3} over {} points",
                summary.rejection_rate, summary.undercover_rate, summary.horizon
            );
        }
        SimKind::Stream => {
            let sc = args.scenario.scenario(TargetStream::Iid {
                pi1: args.pi1_target,
            })?;
            let n = args.max_target.unwrap_or(2000);
            let samples = sample_label_shift(&sc.gaussian(args.pi1_target), n, args.seed)?;
            if sink.format != output::Format::Jsonl {
                bail!("streams are exported as JSONL; pass --format jsonl");
            }
            for s in &samples {
                sink.row(String::new, s)?;
            }
        }
    }
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_bounds_compare(args: &BoundsCompareArgs) -> Result<ExitCode> {
    let source = match args.bernoulli {
        Some(p) => LossSource::Bernoulli { p },
        None => LossSource::Scenario {
            scenario: args.scenario.scenario(TargetStream::Iid {
                pi1: args.scenario.pi1_source,
            })?,
        },
    };
    let cfgs: Vec<_> = upper_configs(&args.methods, args.delta)?
        .into_iter()
        .map(|c| c.with_grid_resolution(args.grid_resolution))
        .collect();
    let rows = bounds_compare(&source, &args.ns, &cfgs, args.reps, args.seed)?;
    let mut sink = args.output.open("bounds-compare", args, Some(args.seed))?;
    sink.header(BoundsCompareRow::CSV_HEADER)?;
    for r in &rows {
        sink.row(|| r.csv_row(), r)?;
    }
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn cmd_baseline(args: &BaselineArgs) -> Result<ExitCode> {
    let mut sink = args.output.open("baseline", args, Some(args.seed))?;
    match args.experiment {
        BaselineKind::CltFixed | BaselineKind::CltCumulative => {
            let mut cfg = CltBettingConfig::standard(args.seed);
            cfg.p = args.p;
            cfg.delta = args.delta;
            cfg.horizon = args.horizon;
            if args.experiment == BaselineKind::CltFixed {
                cfg.fixed_draws = args.reps.unwrap_or(cfg.fixed_draws);
                cfg.runs = 0;
                cfg.horizon = 0;
            } else {
                cfg.runs = args.reps.unwrap_or(cfg.runs);
                cfg.fixed_sizes.clear();
            }
            let res = clt_vs_betting_experiment(&cfg)?;
            if args.experiment == BaselineKind::CltFixed {
                sink.header("t,clt_miscoverage,betting_miscoverage,draws")?;
                for r in &res.fixed {
                    let FixedTimeRow {
                        t,
                        clt_miscoverage,
                        betting_miscoverage,
                        draws,
                    } = r;
                    sink.row(
                        || format!("{t},{clt_miscoverage},{betting_miscoverage},{draws}"),
                        r,
                    )?;
                }
            } else {
                sink.header(
                    "t,clt_cumulative,betting_cumulative,betting_mean_lower,clt_poly_step_mean_lower,\
                     clt_power_25_mean_lower,clt_poly_25_mean_lower",
                )?;
                for r in &res.cumulative {
                    let CumulativeRow {
                        t,
                        clt_cumulative,
                        betting_cumulative,
                        betting_mean_lower,
                        clt_poly_step_mean_lower,
                        clt_power_25_mean_lower,
                        clt_poly_25_mean_lower,
                    } = r;
                    sink.row(
                        || {
                            format!(
                                "{t},{clt_cumulative},{betting_cumulative},{betting_mean_lower},{clt_poly_step_mean_lower},{},{}",
                                opt_csv(*clt_power_25_mean_lower),
                                opt_csv(*clt_poly_25_mean_lower)
                            )
                        },
                        r,
                    )?;
                }
            }
        }
        BaselineKind::Conformal => {
            let kind = match args.betting {
                BetArg::Mixture => BettingKind::SimpleMixture,
                BetArg::Simple => BettingKind::SimpleBet {
                    epsilon: args.epsilon,
                },
            };
            let cfg = ConformalConfig {
                setting: args.setting,
                kind,
                runs: args.reps.unwrap_or(50),
                shift_len: args.horizon.max(1) as usize,
                alpha: args.alpha,
                ..ConformalConfig::standard(args.setting, args.seed)
            };
            let runs = conformal_experiment(&cfg)?;
            sink.header("run,t,log_wealth")?;
            for r in &runs {
                match sink.format {
                    output::Format::Csv => {
                        for (i, w) in r.log_wealth.iter().enumerate() {
                            sink.row(|| format!("{},{},{w}", r.run, i + 1), &())?;
                        }
                    }
                    output::Format::Jsonl => sink.row(String::new, r)?,
                }
            }
            let crossed = runs.iter().filter(|r| r.crossing.is_some()).count();
            eprintln!("{crossed} of {} runs crossed 1/alpha", runs.len());
        }
    }
    sink.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_changepoint(args: &ChangepointArgs) -> Result<ExitCode> {
    let spec = args.test.spec(args.batch_size)?;
    let sc = args.scenario.scenario(TargetStream::Change {
        pi1_before: args.pi1_before,
        pi1_after: args.pi1_after,
    })?;
    let cfg = ArlAddConfig {
        n_runs: args.reps,
        horizon: args.horizon,
        change_locations: args.change_at.clone(),
        spawn: if args.once {
            SpawnPolicy::Once
        } else {
            SpawnPolicy::Every(args.stride)
        },
        seed: args.seed,
    };
    let report = estimate_arl_add(&spec, &sc, &cfg)?;
    let mut sink = args.output.open("changepoint", args, Some(args.seed))?;
    sink.header(riskmon::changepoint::ArlAddReport::CSV_HEADER)?;
    let records: Vec<&RunRecord> = report.runs.iter().collect();
    for (line, rec) in report.csv_rows().zip(records) {
        sink.row(|| line, rec)?;
    }
    sink.finish()?;
    eprintln!(
        "mean null run length {:.1} ({} alarms, {} censored)",
        report.mean_run_length_null, report.null_alarms, report.null_censored
    );
    if let Some(d) = report.worst_mean_delay {
        eprintln!("worst mean detection delay {d:.1}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Monitor(a) => cmd_monitor(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::BoundsCompare(a) => cmd_bounds_compare(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Changepoint(a) => cmd_changepoint(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
