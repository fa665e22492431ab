//! Bounded losses for point, probabilistic and set-valued classifiers.
//!
//! Every loss here maps into `[0, 1]` so that the concentration machinery in
//! [`crate::bounds`] can assume unit range. The weighted misclassification loss
//! is divided by its maximal cost `L`; multiply a bound by `L` to get back to
//! the original scale.

use serde::{Deserialize, Serialize};

use crate::bounds::{BoundConfig, BoundMethod};
use crate::error::{domain, Result};

/// Tolerance on `|sum(probs) - 1|`. Distributions outside it are rejected, never renormalized.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Default number of evenly spaced points in the RCPS `lambda` grid over `[0, 1]`.
pub const DEFAULT_RCPS_GRID: usize = 1001;

/// A predicted distribution over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(domain(format!(
                "a label distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(domain(format!("class probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(domain(format!("class probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// One-hot distribution on `class` among `num_classes`.
    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        check_index(class, num_classes)?;
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self::new(probs)
    }

    /// Binary distribution `(1 - p, p)`.
    pub fn binary(p1: f64) -> Result<Self> {
        Self::new(vec![1.0 - p1, p1])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Probability mass of the labels strictly more likely than `class`.
    pub fn mass_above(&self, class: usize) -> f64 {
        let fy = self.probs[class];
        self.probs.iter().filter(|&&p| p > fy).sum()
    }

    fn check_label(&self, y: usize) -> Result<()> {
        check_index(y, self.num_classes())
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = crate::Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

/// Per-class misclassification costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CostVector {
    costs: Vec<f64>,
    max_cost: f64,
}

impl CostVector {
    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(domain("costs must be finite and nonnegative"));
        }
        let max_cost = costs.iter().copied().fold(0.0, f64::max);
        if max_cost <= 0.0 {
            return Err(domain("cost vector must contain a positive cost"));
        }
        Ok(Self { costs, max_cost })
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// `L`, the largest per-class cost.
    pub fn max_cost(&self) -> f64 {
        self.max_cost
    }
}

impl TryFrom<Vec<f64>> for CostVector {
    type Error = crate::Error;

    fn try_from(costs: Vec<f64>) -> Result<Self> {
        Self::new(costs)
    }
}

impl From<CostVector> for Vec<f64> {
    fn from(c: CostVector) -> Self {
        c.costs
    }
}

/// What a predictor emitted for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Label(usize),
    Distribution(LabelDistribution),
    /// Candidate label set; may be empty.
    Set(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prediction: Prediction,
    pub true_label: usize,
}

/// Loss selector used by record-level evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Misclassification,
    WeightedMisclassification(CostVector),
    Brier,
    TopLabelBrier,
    TrueClassBrier,
    Miscoverage,
}

impl LossKind {
    /// Evaluates the loss on a record. `num_classes` bounds the label indices of
    /// point and set predictions; distributions carry their own class count.
    pub fn evaluate(&self, record: &PredictionRecord, num_classes: usize) -> Result<f64> {
        let y = record.true_label;
        match (self, &record.prediction) {
            (LossKind::Misclassification, Prediction::Label(p)) => {
                misclassification_loss(*p, y, num_classes)
            }
            (LossKind::Misclassification, Prediction::Distribution(f)) => {
                misclassification_loss(f.argmax(), y, f.num_classes())
            }
            (LossKind::WeightedMisclassification(c), Prediction::Label(p)) => {
                weighted_misclassification_loss(*p, y, c)
            }
            (LossKind::WeightedMisclassification(c), Prediction::Distribution(f)) => {
                weighted_misclassification_loss(f.argmax(), y, c)
            }
            (LossKind::Brier, Prediction::Distribution(f)) => brier_loss(f, y),
            (LossKind::TopLabelBrier, Prediction::Distribution(f)) => top_label_brier_loss(f, y),
            (LossKind::TrueClassBrier, Prediction::Distribution(f)) => true_class_brier_loss(f, y),
            (LossKind::Miscoverage, Prediction::Set(s)) => miscoverage_loss(s, y, num_classes),
            (kind, pred) => Err(domain(format!(
                "loss {kind:?} is not defined for prediction {pred:?}"
            ))),
        }
    }
}

fn check_index(k: usize, num_classes: usize) -> Result<()> {
    if k < num_classes {
        Ok(())
    } else {
        Err(domain(format!(
            "class index {k} out of range for {num_classes} classes"
        )))
    }
}

/// `1{pred != y}`.
pub fn misclassification_loss(pred: usize, y: usize, num_classes: usize) -> Result<f64> {
    check_index(pred, num_classes)?;
    check_index(y, num_classes)?;
    Ok(if pred == y { 0.0 } else { 1.0 })
}

/// `cost_y * 1{pred != y} / L`.
pub fn weighted_misclassification_loss(pred: usize, y: usize, costs: &CostVector) -> Result<f64> {
    let k = costs.costs().len();
    check_index(pred, k)?;
    check_index(y, k)?;
    if pred == y {
        Ok(0.0)
    } else {
        Ok(costs.costs()[y] / costs.max_cost())
    }
}

/// Half the squared distance between `f` and the one-hot encoding of `y`.
pub fn brier_loss(f: &LabelDistribution, y: usize) -> Result<f64> {
    f.check_label(y)?;
    let sq: f64 = f
        .probs()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let d = p - if k == y { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok((0.5 * sq).min(1.0))
}

pub fn top_label_brier_loss(f: &LabelDistribution, y: usize) -> Result<f64> {
    f.check_label(y)?;
    let top = f.argmax();
    let hit = if top == y { 1.0 } else { 0.0 };
    let d = f.prob(top) - hit;
    Ok(d * d)
}

pub fn true_class_brier_loss(f: &LabelDistribution, y: usize) -> Result<f64> {
    f.check_label(y)?;
    let d = f.prob(y) - 1.0;
    Ok(d * d)
}

/// `1{y not in set}`.
pub fn miscoverage_loss(set: &[usize], y: usize, num_classes: usize) -> Result<f64> {
    check_index(y, num_classes)?;
    for &k in set {
        check_index(k, num_classes)?;
    }
    Ok(if set.contains(&y) { 0.0 } else { 1.0 })
}

/// Labels whose strictly-more-likely mass is at most `lambda`, in ascending order.
pub fn density_superlevel_set(f: &LabelDistribution, lambda: f64) -> Vec<usize> {
    (0..f.num_classes())
        .filter(|&y| f.mass_above(y) <= lambda)
        .collect()
}

/// Holdout scores and labels used to calibrate a nested family of prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPredictorFamily {
    pub scores: Vec<LabelDistribution>,
    pub labels: Vec<usize>,
}

impl SetPredictorFamily {
    pub fn new(scores: Vec<LabelDistribution>, labels: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(domain("score rows and labels differ in length"));
        }
        for (f, &y) in scores.iter().zip(&labels) {
            f.check_label(y)?;
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Miscoverage losses of `S_lambda` on every calibration point, in order.
    pub fn miscoverage_losses(&self, lambda: f64) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.labels)
            .map(|(f, &y)| if f.mass_above(y) <= lambda { 0.0 } else { 1.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcpsCalibration {
    pub lambda: f64,
    /// Upper confidence bound on the miscoverage risk at `lambda`.
    pub risk_upper: f64,
    /// No grid value had its bound below `beta`; `lambda` fell back to 1.
    pub saturated: bool,
}

/// Picks the smallest grid `lambda` such that the upper confidence bound on
/// miscoverage stays below `beta` at `lambda` and at every larger grid value.
pub fn rcps_calibrate(
    family: &SetPredictorFamily,
    beta: f64,
    gamma: f64,
    bound_method: BoundMethod,
) -> Result<RcpsCalibration> {
    rcps_calibrate_with_grid(family, beta, gamma, bound_method, DEFAULT_RCPS_GRID)
}

pub fn rcps_calibrate_with_grid(
    family: &SetPredictorFamily,
    beta: f64,
    gamma: f64,
    bound_method: BoundMethod,
    grid_points: usize,
) -> Result<RcpsCalibration> {
    if family.is_empty() {
        return Err(domain("RCPS calibration needs at least one point"));
    }
    crate::error::check_open_unit(gamma, "gamma")?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(domain(format!("beta must lie in (0, 1], got {beta}")));
    }
    if grid_points < 2 {
        return Err(domain("RCPS grid needs at least 2 points"));
    }
    let config = BoundConfig::new(bound_method, gamma)?;
    let step = 1.0 / (grid_points - 1) as f64;

    // Scan from lambda = 1 downwards; losses only change when a set shrinks,
    // so the bound is recomputed only on a change.
    let mut accepted: Option<RcpsCalibration> = None;
    let mut cached: Option<(Vec<f64>, f64)> = None;
    for j in (0..grid_points).rev() {
        let lambda = if j == grid_points - 1 {
            1.0
        } else {
            j as f64 * step
        };
        let losses = family.miscoverage_losses(lambda);
        let upper = match &cached {
            Some((prev, u)) if *prev == losses => *u,
            _ => {
                let u = config.upper_bound(&losses)?.value;
                cached = Some((losses, u));
                u
            }
        };
        if upper >= beta {
            break;
        }
        accepted = Some(RcpsCalibration {
            lambda,
            risk_upper: upper,
            saturated: false,
        });
    }
    Ok(accepted.unwrap_or_else(|| {
        let upper = cached.map(|(_, u)| u).unwrap_or(1.0);
        RcpsCalibration {
            lambda: 1.0,
            risk_upper: upper,
            saturated: true,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn misclassification_examples() {
        assert_eq!(misclassification_loss(2, 2, 3).unwrap(), 0.0);
        assert_eq!(misclassification_loss(0, 1, 3).unwrap(), 1.0);
        let f = dist(&[0.1, 0.7, 0.2]);
        assert_eq!(misclassification_loss(f.argmax(), 1, 3).unwrap(), 0.0);
        assert!(misclassification_loss(3, 1, 3).is_err());
        assert!(misclassification_loss(0, 5, 3).is_err());
    }

    #[test]
    fn weighted_misclassification_rescales_by_max_cost() {
        let c = CostVector::new(vec![1.0, 4.0]).unwrap();
        assert_eq!(weighted_misclassification_loss(1, 1, &c).unwrap(), 0.0);
        assert_eq!(weighted_misclassification_loss(0, 1, &c).unwrap(), 1.0);
        assert_eq!(weighted_misclassification_loss(1, 0, &c).unwrap(), 0.25);
        assert!(CostVector::new(vec![0.0, 0.0]).is_err());
        assert!(CostVector::new(vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn brier_variants() {
        assert_eq!(
            brier_loss(&LabelDistribution::one_hot(1, 3).unwrap(), 1).unwrap(),
            0.0
        );
        assert!((brier_loss(&dist(&[0.5, 0.5]), 0).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(brier_loss(&dist(&[1.0, 0.0]), 1).unwrap(), 1.0);

        assert_eq!(
            top_label_brier_loss(&LabelDistribution::one_hot(2, 3).unwrap(), 2).unwrap(),
            0.0
        );
        assert!((top_label_brier_loss(&dist(&[0.6, 0.4]), 1).unwrap() - 0.36).abs() < 1e-15);
        assert!((top_label_brier_loss(&dist(&[0.6, 0.4]), 0).unwrap() - 0.16).abs() < 1e-15);

        assert_eq!(true_class_brier_loss(&dist(&[0.0, 1.0]), 1).unwrap(), 0.0);
        assert_eq!(true_class_brier_loss(&dist(&[1.0, 0.0]), 1).unwrap(), 1.0);
        assert!((true_class_brier_loss(&dist(&[0.3, 0.7]), 0).unwrap() - 0.49).abs() < 1e-15);
    }

    #[test]
    fn top_label_ties_go_to_lowest_index() {
        let f = dist(&[0.4, 0.4, 0.2]);
        assert_eq!(f.argmax(), 0);
        // top label 0 is wrong for y = 1 even though class 1 ties with it
        assert!((top_label_brier_loss(&f, 1).unwrap() - 0.16).abs() < 1e-15);
    }

    #[test]
    fn miscoverage_examples() {
        assert_eq!(miscoverage_loss(&[0, 1, 2], 1, 3).unwrap(), 0.0);
        assert_eq!(miscoverage_loss(&[], 0, 3).unwrap(), 1.0);
        assert_eq!(miscoverage_loss(&[2], 0, 3).unwrap(), 1.0);
        assert!(miscoverage_loss(&[7], 0, 3).is_err());
    }

    #[test]
    fn superlevel_set_examples() {
        let f = dist(&[0.7, 0.2, 0.1]);
        assert_eq!(density_superlevel_set(&f, 1.0), vec![0, 1, 2]);
        assert_eq!(density_superlevel_set(&f, 0.0), vec![0]);
        assert_eq!(density_superlevel_set(&f, 0.7), vec![0, 1]);
    }

    #[test]
    fn distribution_validation_rejects_instead_of_repairing() {
        assert!(LabelDistribution::new(vec![0.5, 0.5 + 2e-9]).is_err());
        assert!(LabelDistribution::new(vec![0.5, 0.5 + 5e-10]).is_ok());
        assert!(LabelDistribution::new(vec![1.0]).is_err());
        assert!(LabelDistribution::new(vec![1.2, -0.2]).is_err());
        let parsed: std::result::Result<LabelDistribution, _> = serde_json::from_str("[0.3, 0.3]");
        assert!(parsed.is_err());
    }

    #[test]
    fn record_evaluation_dispatches() {
        let rec = PredictionRecord {
            prediction: Prediction::Distribution(dist(&[0.2, 0.8])),
            true_label: 0,
        };
        assert_eq!(LossKind::Misclassification.evaluate(&rec, 2).unwrap(), 1.0);
        assert!((LossKind::TrueClassBrier.evaluate(&rec, 2).unwrap() - 0.64).abs() < 1e-15);
        assert!(LossKind::Miscoverage.evaluate(&rec, 2).is_err());
        let set = PredictionRecord {
            prediction: Prediction::Set(vec![0]),
            true_label: 0,
        };
        assert_eq!(LossKind::Miscoverage.evaluate(&set, 2).unwrap(), 0.0);
    }

    fn family(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> SetPredictorFamily {
        SetPredictorFamily::new(rows.into_iter().map(|r| dist(&r)).collect(), labels).unwrap()
    }

    #[test]
    fn rcps_perfect_scores_pick_zero() {
        let n = 2000;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rows = labels
            .iter()
            .map(|&y| {
                let mut r = vec![0.0; 3];
                r[y] = 1.0;
                r
            })
            .collect();
        let fam = family(rows, labels);
        let cal = rcps_calibrate(&fam, 0.1, 0.05, BoundMethod::Betting).unwrap();
        assert_eq!(cal.lambda, 0.0);
        assert!(!cal.saturated);
    }

    #[test]
    fn rcps_beta_one_picks_zero() {
        let n = 300;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let rows = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    vec![0.3, 0.7]
                } else {
                    vec![0.6, 0.4]
                }
            })
            .collect();
        let fam = family(rows, labels);
        let cal = rcps_calibrate(&fam, 1.0, 0.1, BoundMethod::FixedHoeffding).unwrap();
        assert_eq!(cal.lambda, 0.0);
    }

    #[test]
    fn rcps_adversarial_saturates() {
        let n = 100;
        let labels = vec![2; n];
        let rows = vec![vec![0.6, 0.4, 0.0]; n];
        let fam = family(rows, labels);
        let cal = rcps_calibrate(&fam, 0.05, 0.1, BoundMethod::FixedHoeffding).unwrap();
        assert_eq!(cal.lambda, 1.0);
        assert!(cal.saturated);
    }

    #[test]
    fn rcps_validates_inputs() {
        let fam = family(vec![vec![0.5, 0.5]], vec![0]);
        assert!(rcps_calibrate(&fam, 0.1, 0.0, BoundMethod::Betting).is_err());
        assert!(rcps_calibrate(&fam, 0.0, 0.1, BoundMethod::Betting).is_err());
        let empty = SetPredictorFamily::new(vec![], vec![]).unwrap();
        assert!(rcps_calibrate(&empty, 0.1, 0.1, BoundMethod::Betting).is_err());
    }

    fn simplex(k: usize) -> impl Strategy<Value = LabelDistribution> {
        prop::collection::vec(0.0f64..1.0, k).prop_filter_map("degenerate", |w| {
            let s: f64 = w.iter().sum();
            if s <= 1e-6 {
                return None;
            }
            let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let tail: f64 = p[1..].iter().sum();
            p[0] = (1.0 - tail).max(0.0);
            LabelDistribution::new(p).ok()
        })
    }

    proptest! {
        #[test]
        fn losses_stay_in_unit_interval(f in (2usize..6).prop_flat_map(simplex), y in 0usize..6, pred in 0usize..6) {
            let k = f.num_classes();
            let y = y % k;
            let pred = pred % k;
            for v in [
                brier_loss(&f, y).unwrap(),
                top_label_brier_loss(&f, y).unwrap(),
                true_class_brier_loss(&f, y).unwrap(),
                misclassification_loss(pred, y, k).unwrap(),
                miscoverage_loss(&density_superlevel_set(&f, 0.5), y, k).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn binary_brier_variants_coincide(p in 0.0f64..=1.0, y in 0usize..2) {
            let f = LabelDistribution::binary(p).unwrap();
            let b = brier_loss(&f, y).unwrap();
            prop_assert!((b - top_label_brier_loss(&f, y).unwrap()).abs() < 1e-12);
            prop_assert!((b - true_class_brier_loss(&f, y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn superlevel_sets_are_nested(f in (2usize..6).prop_flat_map(simplex), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = density_superlevel_set(&f, lo);
            let large = density_superlevel_set(&f, hi);
            prop_assert!(small.iter().all(|y| large.contains(y)));
        }

        #[test]
        fn rcps_lambda_nonincreasing_in_beta(seed in 0u64..500, b1 in 0.05f64..0.6, b2 in 0.05f64..0.6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let mut rows = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let w: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = w.iter().sum();
                let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
                p[0] = 1.0 - p[1] - p[2];
                rows.push(p);
                labels.push(rng.random_range(0..3));
            }
            let fam = family(rows, labels);
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let grid = 101;
            let l_lo = rcps_calibrate_with_grid(&fam, lo, 0.1, BoundMethod::FixedHoeffding, grid).unwrap();
            let l_hi = rcps_calibrate_with_grid(&fam, hi, 0.1, BoundMethod::FixedHoeffding, grid).unwrap();
            prop_assert!(l_hi.lambda <= l_lo.lambda);
        }
    }
}
