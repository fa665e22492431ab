//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs at full replication counts. Criteria listed in `KNOWN_FAILURES` are
//! reported but do not fail the target; every other criterion must pass.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use riskmon::baselines::{
    conformal_p_value, martingale_update, BettingKind, ConformalMartingaleState,
};
use riskmon::bounds::BoundMethod;
use riskmon::changepoint::{estimate_arl_add, ArlAddConfig, SpawnPolicy};
use riskmon::experiments::*;
use riskmon::losses::{brier_loss, top_label_brier_loss, true_class_brier_loss, LabelDistribution};
use riskmon::scenario::{ScenarioConfig, TargetStream};
use riskmon::seqtest::TestSpec;
use riskmon::simgen::{
    analytic_target_misclassification_risk, bayes_losses, derive_seed, harm_boundary, rng,
    sample_label_shift, standard_normal, uniform_open, GaussianLabelShiftConfig,
};

const SEED: u64 = 20_231_016;

/// Criteria expected to fail, with the reason kept in the project notes.
const KNOWN_FAILURES: &[&str] = &[
    "3 stopping-time ordering",
    "5 CLT versus betting coverage",
    "7 conformal contrast",
];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn mc_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn frac(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

fn standard_boundary() -> f64 {
    harm_boundary(&GaussianLabelShiftConfig::standard(0.5), 0.05)
        .unwrap()
        .expect("harmful region exists")
}

fn crit1_type_one() -> Outcome {
    let delta = 0.05;
    let runs = 1000;
    let limit = delta + 3.0 * mc_se(delta, runs);
    let sc = ScenarioConfig::standard(TargetStream::Iid {
        pi1: standard_boundary(),
    });
    let mut pass = true;
    let mut parts = vec![];
    for (i, m) in [
        BoundMethod::PmHoeffding,
        BoundMethod::PmEmpiricalBernstein,
        BoundMethod::Betting,
        BoundMethod::Cmeb,
    ]
    .into_iter()
    .enumerate()
    {
        let spec = TestSpec::absolute(0.05, delta)
            .unwrap()
            .with_methods(BoundMethod::Betting, m);
        let (rej, _) =
            rejection_fraction(&spec, &sc, runs, 10_000, derive_seed(SEED, &[1, i as u64]))
                .unwrap();
        let f = frac(rej, runs);
        pass &= f <= limit;
        parts.push(format!("{m}={f:.3}"));
    }
    Outcome {
        id: "1 type-I control",
        pass,
        detail: format!("{} (limit {limit:.4})", parts.join(" ")),
    }
}

fn crit2_and_3_grid() -> (Outcome, Outcome) {
    let exp = GridExperiment::standard(derive_seed(SEED, &[2]));
    let rows = label_shift_grid(&exp).unwrap();
    let star = standard_boundary();
    let step = exp.grid[1] - exp.grid[0];
    let betting: Vec<&GridRow> = rows.iter().filter(|r| r.method == "betting").collect();

    let benign_max = betting
        .iter()
        .filter(|r| !r.harmful)
        .map(|r| r.rejection_rate)
        .fold(0.0, f64::max);
    let at_top = betting.last().unwrap().rejection_rate;
    let last_benign = betting
        .iter()
        .filter(|r| !r.harmful)
        .map(|r| r.pi1_target)
        .fold(f64::NAN, f64::max);
    let first_harmful = betting
        .iter()
        .find(|r| r.harmful)
        .map(|r| r.pi1_target)
        .unwrap_or(f64::NAN);
    let split_ok = last_benign <= star
        && first_harmful > star
        && first_harmful - star <= step
        && star - last_benign <= step;
    let empirical = betting
        .iter()
        .find(|r| r.rejection_rate > 0.1)
        .map(|r| r.pi1_target);
    let c2 = Outcome {
        id: "2 rejection curve shape",
        pass: benign_max <= 0.1 && at_top >= 0.9 && split_ok,
        detail: format!(
            "benign max {benign_max:.3}, rate at 0.9 {at_top:.3}, split ({last_benign:.4}, {first_harmful:.4}] vs boundary {star:.4}, \
             first grid point above 0.1 {}",
            empirical.map_or("none".into(), |p| format!("{p:.4}"))
        ),
    };

    let mut violations = vec![];
    for &g in exp.grid.iter() {
        let get = |name: &str| {
            rows.iter()
                .find(|r| r.pi1_target == g && r.method == name)
                .unwrap()
        };
        let (h, e, b) = (get("hoeffding"), get("pm-eb"), get("betting"));
        if b.harmful
            && !(b.mean_stopping_time <= e.mean_stopping_time
                && e.mean_stopping_time <= h.mean_stopping_time)
        {
            violations.push(format!(
                "{g:.3} (betting {:.1}, pm-eb {:.1}, hoeffding {:.1})",
                b.mean_stopping_time, e.mean_stopping_time, h.mean_stopping_time
            ));
        }
    }
    let median_at_top = |name: &str| {
        let r = rows.iter().rev().find(|r| r.method == name).unwrap();
        median_stopping_time(&r.stopping_times).unwrap()
    };
    let c3 = Outcome {
        id: "3 stopping-time ordering",
        pass: violations.is_empty(),
        detail: format!(
            "violations: {}; medians at 0.9: betting {} pm-eb {} hoeffding {}",
            if violations.is_empty() {
                "none".to_string()
            } else {
                violations.join(", ")
            },
            median_at_top("betting"),
            median_at_top("pm-eb"),
            median_at_top("hoeffding")
        ),
    };
    (c2, c3)
}

fn crit4_eps_appr() -> Outcome {
    let rows = bounds_compare(
        &LossSource::Scenario {
            scenario: ScenarioConfig::standard(TargetStream::Iid { pi1: 0.25 }),
        },
        &[1000],
        &upper_configs(&[BoundMethod::Betting], 0.025).unwrap(),
        200,
        derive_seed(SEED, &[4]),
    )
    .unwrap();
    let e = rows[0].mean_eps_appr;
    Outcome {
        id: "4 source approximation error",
        pass: (0.015..=0.035).contains(&e),
        detail: format!("mean eps_appr {e:.4} over 200 draws"),
    }
}

fn crit5_clt() -> Outcome {
    let cfg = CltBettingConfig::standard(derive_seed(SEED, &[5]));
    let res = clt_vs_betting_experiment(&cfg).unwrap();
    let fixed_limit = 0.1 + 3.0 * mc_se(0.1, cfg.fixed_draws);
    let clt_max = res
        .fixed
        .iter()
        .map(|r| r.clt_miscoverage)
        .fold(0.0, f64::max);
    let bet_max = res
        .fixed
        .iter()
        .map(|r| r.betting_miscoverage)
        .fold(0.0, f64::max);
    let clt_at = res
        .fixed
        .iter()
        .find(|r| r.clt_miscoverage == clt_max)
        .unwrap()
        .t;
    let cross = res
        .cumulative
        .iter()
        .find(|r| r.clt_cumulative > 0.1)
        .map(|r| r.t);
    let bet_final = res.cumulative.last().unwrap().betting_cumulative;
    let cum_limit = 0.1 + 3.0 * mc_se(0.1, cfg.runs);
    Outcome {
        id: "5 CLT versus betting coverage",
        pass: clt_max <= fixed_limit && bet_max <= fixed_limit && cross.is_some() && bet_final <= cum_limit,
        detail: format!(
            "fixed-time max CLT {clt_max:.2} (t={clt_at}) betting {bet_max:.2} (limit {fixed_limit:.2}); \
             CLT cumulative crosses 0.1 at t={}; betting cumulative {bet_final:.3} (limit {cum_limit:.4})",
            cross.map_or("never".into(), |t| t.to_string())
        ),
    }
}

fn crit6_drift() -> Outcome {
    let exp = DriftExperiment::standard(derive_seed(SEED, &[6]));
    let s = drift_experiment(&exp).unwrap();
    let limit = 0.025 + 3.0 * mc_se(0.025, exp.runs);
    Outcome {
        id: "6 running-risk drift",
        pass: s.rejection_rate >= 0.95 && s.undercover_rate <= limit,
        detail: format!(
            "rejection {:.3} within {} points, under-coverage {:.3} (limit {limit:.4})",
            s.rejection_rate, s.horizon, s.undercover_rate
        ),
    }
}

fn crit7_conformal() -> Outcome {
    let runs = 200;
    let cfg = ConformalConfig {
        runs,
        ..ConformalConfig::standard(ConformalSetting::ColdStart, derive_seed(SEED, &[7, 0]))
    };
    let cm = conformal_experiment(&cfg).unwrap();
    let cm_frac = frac(cm.iter().filter(|r| r.crossing.is_some()).count(), runs);
    let sc = ScenarioConfig::standard(TargetStream::Iid { pi1: 0.75 });
    let spec = TestSpec::absolute(0.05, 0.05).unwrap();
    let (rej, _) = rejection_fraction(&spec, &sc, runs, 2000, derive_seed(SEED, &[7, 1])).unwrap();
    let st_frac = frac(rej, runs);
    Outcome {
        id: "7 conformal contrast",
        pass: cm_frac < 0.5 && st_frac > 0.95,
        detail: format!("martingale crossings {cm_frac:.3}, betting test rejections {st_frac:.3}"),
    }
}

fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

fn crit8_oracles() -> Outcome {
    // analytic risk against Monte Carlo
    let mut r = rng(derive_seed(SEED, &[8, 0]));
    let mut worst_risk = 0.0f64;
    for i in 0..5u64 {
        let mut pt = || [4.0 * r.random::<f64>() - 2.0, 4.0 * r.random::<f64>() - 2.0];
        let (mu0, mu1) = loop {
            let (a, b) = (pt(), pt());
            if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() > 0.5 {
                break (a, b);
            }
        };
        let cfg = GaussianLabelShiftConfig {
            mu0,
            mu1,
            pi1_source: 0.1 + 0.8 * r.random::<f64>(),
            pi1_target: 0.1 + 0.8 * r.random::<f64>(),
        };
        let samples = sample_label_shift(&cfg, 1_000_000, derive_seed(SEED, &[8, 1, i])).unwrap();
        let mc = bayes_losses(&samples, &cfg).iter().sum::<f64>() / samples.len() as f64;
        worst_risk =
            worst_risk.max((mc - analytic_target_misclassification_risk(&cfg).unwrap()).abs());
    }

    // binary Brier variants on fuzzed inputs
    let mut r = rng(derive_seed(SEED, &[8, 2]));
    let mut worst_brier = 0.0f64;
    for _ in 0..10_000 {
        let f = LabelDistribution::binary(r.random::<f64>()).unwrap();
        let y = r.random_range(0..2);
        let b = brier_loss(&f, y).unwrap();
        worst_brier = worst_brier
            .max((b - top_label_brier_loss(&f, y).unwrap()).abs())
            .max((b - true_class_brier_loss(&f, y).unwrap()).abs());
    }

    // conformal p-values on exchangeable scores
    let n = 5000;
    let mut st =
        ConformalMartingaleState::new(BettingKind::SimpleMixture, derive_seed(SEED, &[8, 3]))
            .unwrap();
    let mut r = rng(derive_seed(SEED, &[8, 4]));
    let ps: Vec<f64> = (0..n)
        .map(|_| {
            let p = conformal_p_value(&mut st, standard_normal(&mut r)).unwrap();
            martingale_update(&mut st, p).unwrap();
            p
        })
        .collect();
    let d = ks_uniform(ps);
    let ks_crit = 1.628 / (n as f64).sqrt();

    // mean terminal wealth under the null
    let mut wealth_ok = true;
    let mut wealth_detail = vec![];
    for (k, kind) in [
        BettingKind::SimpleBet { epsilon: 0.5 },
        BettingKind::SimpleMixture,
    ]
    .into_iter()
    .enumerate()
    {
        let runs = 2000;
        let w: Vec<f64> = (0..runs as u64)
            .map(|run| {
                let mut st =
                    ConformalMartingaleState::new(kind, derive_seed(SEED, &[8, 5, k as u64, run]))
                        .unwrap();
                let mut r = rng(derive_seed(SEED, &[8, 6, k as u64, run]));
                for _ in 0..200 {
                    st.observe_score(uniform_open(&mut r)).unwrap();
                }
                st.wealth()
            })
            .collect();
        let m = w.iter().sum::<f64>() / runs as f64;
        let sd = (w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        let lim = 1.0 + 3.0 * sd / (runs as f64).sqrt();
        wealth_ok &= m <= lim;
        wealth_detail.push(format!("{m:.3}<={lim:.3}"));
    }

    Outcome {
        id: "8 oracle equivalences",
        pass: worst_risk <= 0.002 && worst_brier <= 1e-12 && d <= ks_crit && wealth_ok,
        detail: format!(
            "risk gap {worst_risk:.5}, Brier gap {worst_brier:.1e}, KS D {d:.4} (crit {ks_crit:.4}), mean wealth {}",
            wealth_detail.join(" ")
        ),
    }
}

fn crit9_arl() -> Outcome {
    let spec = TestSpec::absolute(0.05, 0.1)
        .unwrap()
        .with_methods(BoundMethod::Betting, BoundMethod::PmEmpiricalBernstein);
    let sc = ScenarioConfig::standard(TargetStream::Change {
        pi1_before: 0.25,
        pi1_after: 0.25,
    });
    let cfg = ArlAddConfig {
        n_runs: 500,
        horizon: 2000,
        change_locations: vec![],
        spawn: SpawnPolicy::Every(1),
        seed: derive_seed(SEED, &[9]),
    };
    let rep = estimate_arl_add(&spec, &sc, &cfg).unwrap();
    Outcome {
        id: "9 changepoint run length",
        pass: rep.mean_run_length_null >= 10.0,
        detail: format!(
            "mean alarm time {:.1} ({} alarms, {} censored at 2000)",
            rep.mean_run_length_null, rep.null_alarms, rep.null_censored
        ),
    }
}

fn covariate_shift() -> Outcome {
    let runs = covariate_shift_experiment(&CovariateShiftExperiment::standard(derive_seed(
        SEED,
        &[10],
    )))
    .unwrap();
    let times: Vec<Option<u64>> = runs.iter().map(|r| r.stopping_time).collect();
    let med = median_stopping_time(&times).unwrap();
    let err = runs.iter().map(|r| r.target_error).sum::<f64>() / runs.len() as f64;
    let src = runs.iter().map(|r| r.source_upper).sum::<f64>() / runs.len() as f64;
    Outcome {
        id: "10 covariate shift",
        pass: med < 500.0,
        detail: format!("median stopping time {med} over 100 runs (mean source bound {src:.3}, target error {err:.3})"),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = vec![];
    let mut timed = |f: &dyn Fn() -> Vec<Outcome>| {
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        for x in &mut o {
            x.detail = format!("{} [{secs:.1}s]", x.detail);
            // straight to the handle so the line survives libtest capture
            writeln!(
                std::io::stderr(),
                "{} {}: {}",
                if x.pass { "PASS" } else { "FAIL" },
                x.id,
                x.detail
            )
            .unwrap();
        }
        outcomes.extend(o);
    };
    timed(&|| vec![crit1_type_one()]);
    timed(&|| {
        let (a, b) = crit2_and_3_grid();
        vec![a, b]
    });
    timed(&|| vec![crit4_eps_appr()]);
    timed(&|| vec![crit5_clt()]);
    timed(&|| vec![crit6_drift()]);
    timed(&|| vec![crit7_conformal()]);
    timed(&|| vec![crit8_oracles()]);
    timed(&|| vec![crit9_arl()]);
    timed(&|| vec![covariate_shift()]);

    let mut unexpected = vec![];
    for o in &outcomes {
        if !o.pass && !KNOWN_FAILURES.contains(&o.id) {
            unexpected.push(o.id);
        }
    }
    assert!(unexpected.is_empty(), "failing criteria: {unexpected:?}");
}
