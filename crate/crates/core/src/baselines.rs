//! Comparison methods: CLT intervals (optionally Bonferroni-corrected) and
//! conformal test martingales.

use std::sync::OnceLock;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, check_unit, domain, Result};
use crate::losses::LabelDistribution;
use crate::simgen::{normal_quantile, uniform_open, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    None,
    /// Level `delta / 2^k` at the `k`-th evaluation.
    PowerBonferroni,
    /// Level `6 delta / (pi^2 k^2)` at the `k`-th evaluation.
    PolynomialBonferroni,
}

/// Running Gaussian-approximation lower bound `mean - z sigma / sqrt(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltBoundState {
    t: u64,
    sum_z: f64,
    /// Sum of squared deviations from the running mean (Welford).
    sum_sq_dev: f64,
    delta: f64,
    correction: Correction,
    eval_count: u64,
}

impl CltBoundState {
    pub fn new(delta: f64, correction: Correction) -> Result<Self> {
        check_open_unit(delta, "delta")?;
        Ok(Self {
            t: 0,
            sum_z: 0.0,
            sum_sq_dev: 0.0,
            delta,
            correction,
            eval_count: 0,
        })
    }

    pub fn observe(&mut self, z: f64) -> Result<()> {
        check_unit(z, "loss")?;
        let before = if self.t == 0 { z } else { self.mean() };
        self.t += 1;
        self.sum_z += z;
        self.sum_sq_dev += (z - before) * (z - self.mean());
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.t
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_count
    }

    pub fn mean(&self) -> f64 {
        self.sum_z / self.t as f64
    }

    /// Level used at the `k`-th evaluation.
    pub fn effective_delta(&self, k: u64) -> f64 {
        match self.correction {
            Correction::None => self.delta,
            Correction::PowerBonferroni => libm::ldexp(self.delta, -(k.min(1 << 20) as i32)),
            Correction::PolynomialBonferroni => {
                let k = k as f64;
                6.0 / (std::f64::consts::PI * std::f64::consts::PI) * self.delta / (k * k)
            }
        }
    }

    /// Spends one evaluation and returns the lower bound; 0 before two observations.
    pub fn evaluate(&mut self) -> f64 {
        self.eval_count += 1;
        if self.t < 2 {
            return 0.0;
        }
        let n = self.t as f64;
        let mean = self.sum_z / n;
        let var = (self.sum_sq_dev / (n - 1.0)).max(0.0);
        let d = self.effective_delta(self.eval_count);
        if var == 0.0 {
            return mean;
        }
        // z_d = Phi^-1(1 - d); for underflowed d the bound is vacuous
        if d <= f64::MIN_POSITIVE {
            return f64::NEG_INFINITY;
        }
        mean + normal_quantile(d) * (var / n).sqrt()
    }
}

/// Observes `z` and evaluates the bound.
pub fn clt_lower(state: &mut CltBoundState, z: f64) -> Result<f64> {
    state.observe(z)?;
    Ok(state.evaluate())
}

/// `-|y - y_hat|`.
pub fn conformity_score_regression(y: f64, y_hat: f64) -> f64 {
    -(y - y_hat).abs()
}

/// `1 - sum_k f_k 1{f_k > f_y}`; equals 1 when `y` is a top label.
pub fn conformity_score_classification(f: &LabelDistribution, y: usize) -> Result<f64> {
    if y >= f.num_classes() {
        return Err(domain(format!(
            "label {y} out of range for {} classes",
            f.num_classes()
        )));
    }
    Ok(1.0 - f.mass_above(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BettingKind {
    /// Wealth multiplied by `eps p^(eps - 1)` each step.
    SimpleBet { epsilon: f64 },
    /// Simple bets integrated over `eps` in `[0, 1]`.
    SimpleMixture,
}

/// Conformal test martingale over a stream of conformity scores.
///
/// Keeps every score (sorted) for rank computation. Tie-breaking uniforms come
/// from a seeded ChaCha8 stream, one 64-bit word per p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalMartingaleState {
    sorted_scores: Vec<f64>,
    kind: BettingKind,
    /// `log S_n` for simple bets.
    log_wealth: f64,
    /// `sum log p_i` for the mixture.
    sum_log_p: f64,
    n: u64,
    seed: u64,
    draws: u64,
    #[serde(skip)]
    rng: Option<SimRng>,
}

impl ConformalMartingaleState {
    pub fn new(kind: BettingKind, seed: u64) -> Result<Self> {
        if let BettingKind::SimpleBet { epsilon } = kind {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(domain(format!(
                    "simple-bet epsilon must lie in (0, 1], got {epsilon}"
                )));
            }
        }
        Ok(Self {
            sorted_scores: Vec::new(),
            kind,
            log_wealth: 0.0,
            sum_log_p: 0.0,
            n: 0,
            seed,
            draws: 0,
            rng: None,
        })
    }

    fn next_uniform(&mut self) -> f64 {
        let (seed, draws) = (self.seed, self.draws);
        let rng = self.rng.get_or_insert_with(|| {
            let mut r = SimRng::seed_from_u64(seed);
            // each draw consumes two 32-bit words
            r.set_word_pos(2 * draws as u128);
            r
        });
        self.draws += 1;
        uniform_open(rng)
    }

    /// Number of p-values bet on so far.
    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn log_wealth(&self) -> f64 {
        match self.kind {
            BettingKind::SimpleBet { .. } => self.log_wealth,
            BettingKind::SimpleMixture => log_mixture_wealth(self.n, self.sum_log_p),
        }
    }

    pub fn wealth(&self) -> f64 {
        self.log_wealth().exp()
    }

    /// Bets on the p-value of `score` and returns the new wealth.
    pub fn observe_score(&mut self, score: f64) -> Result<f64> {
        let p = conformal_p_value(self, score)?;
        martingale_update(self, p)
    }
}

/// Smoothed conformal p-value of a new score; the score joins the history.
pub fn conformal_p_value(state: &mut ConformalMartingaleState, alpha_n: f64) -> Result<f64> {
    if alpha_n.is_nan() {
        return Err(domain("conformity score is NaN"));
    }
    let s = &state.sorted_scores;
    let less = s.partition_point(|&a| a < alpha_n);
    let equal = s.partition_point(|&a| a <= alpha_n) - less + 1;
    state.sorted_scores.insert(less, alpha_n);
    let n = state.sorted_scores.len() as f64;
    let u = state.next_uniform();
    Ok((less as f64 + u * equal as f64) / n)
}

/// Multiplies the wealth by the bet on `p` and returns the new wealth.
pub fn martingale_update(state: &mut ConformalMartingaleState, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(domain(format!("p-value must lie in (0, 1], got {p}")));
    }
    let lp = p.ln();
    state.n += 1;
    match state.kind {
        BettingKind::SimpleBet { epsilon } => {
            state.log_wealth += epsilon.ln() + (epsilon - 1.0) * lp;
        }
        BettingKind::SimpleMixture => state.sum_log_p += lp,
    }
    Ok(state.wealth())
}

const QUADRATURE_NODES: usize = 256;

/// Gauss-Legendre nodes and weights on `(0, 1)`.
fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = QUADRATURE_NODES;
        let mut out = Vec::with_capacity(n);
        for i in 1..=n {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push((0.5 * (x + 1.0), 0.5 * w));
        }
        out
    })
}

/// `log int_0^1 eps^n exp((eps - 1) s) d eps`, with `s = sum log p_i`.
fn log_mixture_wealth(n: u64, s: f64) -> f64 {
    let n = n as f64;
    let terms: Vec<f64> = gauss_legendre()
        .iter()
        .map(|&(e, w)| w.ln() + n * e.ln() + (e - 1.0) * s)
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clt_constant_stream_is_mean() {
        let mut s = CltBoundState::new(0.1, Correction::None).unwrap();
        assert_eq!(clt_lower(&mut s, 0.4).unwrap(), 0.0);
        for _ in 0..50 {
            assert!((clt_lower(&mut s, 0.4).unwrap() - 0.4).abs() < 1e-12);
        }
        assert!(clt_lower(&mut s, 1.3).is_err());
    }

    #[test]
    fn clt_matches_formula() {
        let xs = [0.2, 0.9, 0.4, 0.4, 1.0, 0.0];
        let mut s = CltBoundState::new(0.1, Correction::None).unwrap();
        for &x in &xs {
            s.observe(x).unwrap();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let expect = mean - 1.281_551_565_544_600_5 * sd / n.sqrt();
        assert!((s.evaluate() - expect).abs() < 1e-12);
    }

    #[test]
    fn eval_count_only_moves_on_evaluation() {
        let mut s = CltBoundState::new(0.1, Correction::PowerBonferroni).unwrap();
        for _ in 0..10 {
            s.observe(0.5).unwrap();
        }
        assert_eq!(s.eval_count(), 0);
        s.evaluate();
        s.evaluate();
        assert_eq!(s.eval_count(), 2);
        assert!((s.effective_delta(2) - 0.025).abs() < 1e-16);
        let p = CltBoundState::new(0.1, Correction::PolynomialBonferroni).unwrap();
        assert!(
            (p.effective_delta(3) - 6.0 * 0.1 / (std::f64::consts::PI.powi(2) * 9.0)).abs() < 1e-16
        );
    }

    #[test]
    fn bonferroni_budgets_telescope() {
        // power: sum_{i<=n} 2^-i = (2^n - 1) / 2^n, checked in integers
        let power = CltBoundState::new(0.1, Correction::PowerBonferroni).unwrap();
        let mut num: u128 = 0;
        for n in 1..=120u32 {
            num = 2 * num + 1;
            assert!(num < 1u128 << n);
            assert_eq!(power.effective_delta(n as u64), 0.1 / 2f64.powi(n as i32));
        }
        // polynomial: sum_{i<=n} i^-2 + 1/(n+1) < pi^2/6 because the tail exceeds
        // 1/(n+1) by about 1/(2 n^2), far above the summation error
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 1..=100_000u64 {
            let y = 1.0 / (i as f64 * i as f64) - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            assert!(sum + 1.0 / ((i + 1) as f64) < pi2_6, "i={i}");
        }
    }

    #[test]
    fn power_correction_underflow_is_vacuous() {
        let mut s = CltBoundState::new(0.1, Correction::PowerBonferroni).unwrap();
        for i in 0..2000 {
            s.observe((i % 2) as f64).unwrap();
            let l = s.evaluate();
            assert!(l <= 0.5 && !l.is_nan());
        }
    }

    #[test]
    fn conformity_scores() {
        assert_eq!(conformity_score_regression(2.0, 2.0), 0.0);
        assert_eq!(conformity_score_regression(3.0, 1.0), -2.0);
        assert!(conformity_score_regression(1.0, 1.5) > conformity_score_regression(1.0, 2.5));
        let f = LabelDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(conformity_score_classification(&f, 0).unwrap(), 1.0);
        assert!((conformity_score_classification(&f, 2).unwrap() - 0.2).abs() < 1e-15);
        let u = LabelDistribution::new(vec![0.25; 4]).unwrap();
        for y in 0..4 {
            assert_eq!(conformity_score_classification(&u, y).unwrap(), 1.0);
        }
        assert!(conformity_score_classification(&u, 4).is_err());
    }

    #[test]
    fn p_value_examples() {
        let mut s = ConformalMartingaleState::new(BettingKind::SimpleMixture, 7).unwrap();
        let mut probe = SimRng::seed_from_u64(7);
        let u1 = uniform_open(&mut probe);
        assert_eq!(conformal_p_value(&mut s, 0.3).unwrap(), u1);
        let u2 = uniform_open(&mut probe);
        assert_eq!(conformal_p_value(&mut s, 0.9).unwrap(), (1.0 + u2) / 2.0);
        let u3 = uniform_open(&mut probe);
        // tie with 0.3 plus itself
        assert_eq!(
            conformal_p_value(&mut s, 0.3).unwrap(),
            (0.0 + 2.0 * u3) / 3.0
        );
    }

    #[test]
    fn simple_bet_on_small_p_values() {
        let mut s =
            ConformalMartingaleState::new(BettingKind::SimpleBet { epsilon: 0.1 }, 0).unwrap();
        let w1 = martingale_update(&mut s, 0.01).unwrap();
        let step = 0.1 * 0.01f64.powf(-0.9);
        assert!((w1 - step).abs() < 1e-12 * step);
        assert!((step - 6.3096).abs() < 1e-4 && w1 < 20.0);
        let w2 = martingale_update(&mut s, 0.01).unwrap();
        assert!((w2 - step * step).abs() < 1e-10 && w2 > 20.0);
        assert!(martingale_update(&mut s, 0.0).is_err());
        assert!(martingale_update(&mut s, 1.5).is_err());
        assert!(ConformalMartingaleState::new(BettingKind::SimpleBet { epsilon: 0.0 }, 0).is_err());
    }

    #[test]
    fn quadrature_is_exact_for_polynomials() {
        let nodes = gauss_legendre();
        assert_eq!(nodes.len(), QUADRATURE_NODES);
        let total: f64 = nodes.iter().map(|w| w.1).sum();
        assert!((total - 1.0).abs() < 1e-13);
        for k in [1u64, 5, 40, 300] {
            // s = 0: integral of eps^k is 1/(k+1)
            let v = log_mixture_wealth(k, 0.0);
            assert!((v + ((k + 1) as f64).ln()).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn mixture_matches_closed_form() {
        // n = 1: int eps p^(eps-1) d eps = (p ln p - p + 1) / (p ln^2 p)
        for p in [0.01f64, 0.2, 0.7] {
            let l = p.ln();
            let closed = (p * l - p + 1.0) / (p * l * l);
            let q = log_mixture_wealth(1, l).exp();
            assert!((q - closed).abs() < 1e-10 * closed, "p={p}");
        }
    }

    #[test]
    fn rng_resumes_after_round_trip() {
        let mut a = ConformalMartingaleState::new(BettingKind::SimpleMixture, 11).unwrap();
        for i in 0..37 {
            a.observe_score((i % 7) as f64 / 7.0).unwrap();
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut b: ConformalMartingaleState = serde_json::from_str(&json).unwrap();
        for i in 0..20 {
            let z = (i % 5) as f64 / 5.0;
            assert_eq!(
                a.observe_score(z).unwrap().to_bits(),
                b.observe_score(z).unwrap().to_bits()
            );
        }
    }
}
