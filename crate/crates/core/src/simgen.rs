//! Seeded synthetic data with analytic ground truth.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`).
//! A uniform on `(0, 1)` is `((w >> 11) + 0.5) * 2^-53` for the next 64-bit
//! word `w`; Gaussians are `Phi^-1(u)`. Each generated sample consumes its
//! draws in a fixed order, documented on the sampler.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{check_open_unit, domain, Result};

pub type SimRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream indices (SplitMix64 finalizer per word).
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x6a09_e667_f3bc_c908);
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw strictly inside `(0, 1)`.
pub fn uniform_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    normal_quantile(uniform_open(rng))
}

/// Standard normal CDF via musl's `erfc` (error near 1 ulp).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile; `p` in `(0, 1)`.
///
/// A starting value from `erfc_inv` is polished by one Halley step on
/// `normal_cdf(q) = p`.
pub fn normal_quantile(p: f64) -> f64 {
    let q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !q.is_finite() {
        return q;
    }
    let pdf = (-0.5 * q * q).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if pdf == 0.0 {
        return q;
    }
    let r = (normal_cdf(q) - p) / pdf;
    q - r / (1.0 + 0.5 * q * r)
}

/// Two Gaussian classes with identity covariance under label shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLabelShiftConfig {
    pub mu0: [f64; 2],
    pub mu1: [f64; 2],
    pub pi1_source: f64,
    pub pi1_target: f64,
}

impl GaussianLabelShiftConfig {
    /// Class means at `(-1, 0)` and `(1, 0)`, 25% positives on the source.
    pub fn standard(pi1_target: f64) -> Self {
        Self {
            mu0: [-1.0, 0.0],
            mu1: [1.0, 0.0],
            pi1_source: 0.25,
            pi1_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit(self.pi1_source, "pi1_source")?;
        check_open_unit(self.pi1_target, "pi1_target")?;
        if self.mu0.iter().chain(&self.mu1).any(|v| !v.is_finite()) {
            return Err(domain("class means must be finite"));
        }
        if self.mu0 == self.mu1 {
            return Err(domain("class means must differ"));
        }
        Ok(())
    }

    pub fn with_target(&self, pi1_target: f64) -> Self {
        Self {
            pi1_target,
            ..self.clone()
        }
    }

    /// The same setting with the target marginal equal to the source one.
    pub fn source_view(&self) -> Self {
        self.with_target(self.pi1_source)
    }

    fn direction(&self) -> [f64; 2] {
        [self.mu1[0] - self.mu0[0], self.mu1[1] - self.mu0[1]]
    }

    /// Bayes decision threshold on `x . (mu1 - mu0)`.
    fn threshold(&self) -> f64 {
        let n1 = dot(self.mu1, self.mu1);
        let n0 = dot(self.mu0, self.mu0);
        ((1.0 - self.pi1_source) / self.pi1_source).ln() + 0.5 * (n1 - n0)
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Class-1 posterior under the source marginals.
pub fn bayes_posterior(x: [f64; 2], cfg: &GaussianLabelShiftConfig) -> f64 {
    let logit = dot(x, cfg.direction()) - cfg.threshold();
    1.0 / (1.0 + (-logit).exp())
}

/// Source Bayes classifier: class 1 iff the posterior is at least 1/2.
pub fn bayes_predict(x: [f64; 2], cfg: &GaussianLabelShiftConfig) -> usize {
    usize::from(dot(x, cfg.direction()) >= cfg.threshold())
}

/// Target misclassification risk of the source Bayes classifier. Affine in `pi1_target`.
pub fn analytic_target_misclassification_risk(cfg: &GaussianLabelShiftConfig) -> Result<f64> {
    cfg.validate()?;
    let d = cfg.direction();
    let sd = dot(d, d).sqrt();
    let thr = cfg.threshold();
    let miss1 = normal_cdf((thr - dot(cfg.mu1, d)) / sd);
    let miss0 = normal_cdf((dot(cfg.mu0, d) - thr) / sd);
    Ok(cfg.pi1_target * miss1 + (1.0 - cfg.pi1_target) * miss0)
}

/// Risk of the source Bayes classifier on the source itself.
pub fn analytic_source_risk(cfg: &GaussianLabelShiftConfig) -> Result<f64> {
    analytic_target_misclassification_risk(&cfg.source_view())
}

/// Smallest `pi1_target` whose risk exceeds the source risk by more than `eps_tol`,
/// or `None` if no marginal in `(0, 1)` is harmful.
pub fn harm_boundary(cfg: &GaussianLabelShiftConfig, eps_tol: f64) -> Result<Option<f64>> {
    let r0 = analytic_target_misclassification_risk(&cfg.with_target(0.5))?;
    let slope = analytic_target_misclassification_risk(&cfg.with_target(0.75))? - r0;
    let slope = slope * 4.0;
    let intercept = r0 - 0.5 * slope;
    let target = analytic_source_risk(cfg)? + eps_tol;
    if slope <= 0.0 {
        return Ok(None);
    }
    let pi = (target - intercept) / slope;
    Ok((pi < 1.0).then_some(pi.max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: [f64; 2],
    pub y: usize,
    /// 1-based position in the stream.
    pub t: u64,
    /// Analytic running risk `R^(t)` when the generator knows it.
    pub running_risk: Option<f64>,
}

impl LabeledSample {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

/// Draw order per sample: label uniform, then the two feature normals.
fn draw_label_shift(
    rng: &mut SimRng,
    cfg: &GaussianLabelShiftConfig,
    pi1: f64,
    t: u64,
) -> LabeledSample {
    let y = usize::from(uniform_open(rng) < pi1);
    let mu = if y == 1 { cfg.mu1 } else { cfg.mu0 };
    let x = [mu[0] + standard_normal(rng), mu[1] + standard_normal(rng)];
    LabeledSample {
        x,
        y,
        t,
        running_risk: None,
    }
}

/// `n` i.i.d. samples from the target distribution of `cfg`.
pub fn sample_label_shift(
    cfg: &GaussianLabelShiftConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let mut r = rng(seed);
    Ok((1..=n as u64)
        .map(|t| draw_label_shift(&mut r, cfg, cfg.pi1_target, t))
        .collect())
}

/// 0-1 losses of the source Bayes classifier on a sample.
pub fn bayes_losses(samples: &[LabeledSample], cfg: &GaussianLabelShiftConfig) -> Vec<f64> {
    samples
        .iter()
        .map(|s| f64::from(u8::from(bayes_predict(s.x, cfg) != s.y)))
        .collect()
}

/// Piecewise-constant class-1 marginal over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub segments: Vec<DriftSegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSegment {
    pub pi1: f64,
    pub count: usize,
}

impl DriftSchedule {
    pub fn new(segments: Vec<(f64, usize)>) -> Result<Self> {
        let s = Self {
            segments: segments
                .into_iter()
                .map(|(pi1, count)| DriftSegment { pi1, count })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Evenly stepped marginals `start, start + step, ...` up to `end`, `count` samples each.
    pub fn stepped(start: f64, end: f64, step: f64, count: usize) -> Result<Self> {
        let n = ((end - start) / step).round() as i64;
        if n < 0 {
            return Err(domain("drift schedule must step towards its end"));
        }
        Self::new((0..=n).map(|k| (start + k as f64 * step, count)).collect())
    }

    /// 0.25 to 0.85 in steps of 0.1, 200 samples each.
    pub fn gradual_increase() -> Self {
        Self::stepped(0.25, 0.85, 0.1, 200).expect("valid schedule")
    }

    /// Lengthens the final segment so the schedule covers `horizon` points.
    pub fn held_to(mut self, horizon: usize) -> Self {
        let len = self.len();
        if let Some(last) = self.segments.last_mut() {
            last.count += horizon.saturating_sub(len);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(domain("drift schedule needs at least one segment"));
        }
        for seg in &self.segments {
            check_open_unit(seg.pi1, "segment marginal")?;
            if seg.count == 0 {
                return Err(domain("segment counts must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Marginal in force at 1-based time `t`.
    pub fn pi1_at(&self, t: u64) -> Option<f64> {
        let mut end = 0u64;
        for seg in &self.segments {
            end += seg.count as u64;
            if t >= 1 && t <= end {
                return Some(seg.pi1);
            }
        }
        None
    }
}

/// Concatenated segments, each sample annotated with the analytic running risk.
pub fn sample_drift(
    schedule: &DriftSchedule,
    source: &GaussianLabelShiftConfig,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    schedule.validate()?;
    source.validate()?;
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(schedule.len());
    let mut t = 0u64;
    let mut risk_sum = 0.0;
    for seg in &schedule.segments {
        let risk = analytic_target_misclassification_risk(&source.with_target(seg.pi1))?;
        for _ in 0..seg.count {
            t += 1;
            risk_sum += risk;
            let mut s = draw_label_shift(&mut r, source, seg.pi1, t);
            s.running_risk = Some(risk_sum / t as f64);
            out.push(s);
        }
    }
    Ok(out)
}

/// Which arc a circle-data sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

/// Points at the origin (label 0) or on the unit circle (label 1), plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleShiftConfig {
    pub angle_range_source: (f64, f64),
    pub angle_range_target: (f64, f64),
    /// Variance of each noise coordinate.
    pub noise_variance: f64,
}

impl Default for CircleShiftConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            angle_range_source: (-PI / 3.0, PI / 3.0),
            angle_range_target: (0.0, 2.0 * PI),
            noise_variance: 1.0 / 36.0,
        }
    }
}

impl CircleShiftConfig {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.angle_range_source, self.angle_range_target] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(domain(format!("invalid arc ({lo}, {hi})")));
            }
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(domain("noise variance must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Label rule: 1 iff `x1^2 + x2^2 >= 1/2`.
pub fn circle_label(x: [f64; 2]) -> usize {
    usize::from(x[0] * x[0] + x[1] * x[1] >= 0.5)
}

/// Draw order per sample: assignment uniform, angle uniform (circle points
/// only), then the two noise normals.
pub fn sample_circle_shift(
    cfg: &CircleShiftConfig,
    domain_kind: Domain,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let (lo, hi) = match domain_kind {
        Domain::Source => cfg.angle_range_source,
        Domain::Target => cfg.angle_range_target,
    };
    let sd = cfg.noise_variance.sqrt();
    let mut r = rng(seed);
    Ok((1..=n as u64)
        .map(|t| {
            let center = if uniform_open(&mut r) < 0.5 {
                [0.0, 0.0]
            } else {
                let phi = lo + (hi - lo) * uniform_open(&mut r);
                [phi.cos(), phi.sin()]
            };
            let x = [
                center[0] + sd * standard_normal(&mut r),
                center[1] + sd * standard_normal(&mut r),
            ];
            LabeledSample {
                x,
                y: circle_label(x),
                t,
                running_risk: None,
            }
        })
        .collect())
}

/// `sup_y w_y / inf_{w_y > 0} w_y` with `w_y = pi_target[y] / pi_source[y]`.
///
/// Returns `f64::INFINITY` when the target puts mass on a class the source lacks.
pub fn condition_number(pi_source: &[f64], pi_target: &[f64]) -> Result<f64> {
    if pi_source.len() != pi_target.len() || pi_source.is_empty() {
        return Err(domain("marginals must have the same positive length"));
    }
    for p in [pi_source, pi_target] {
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v))
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(domain("marginals must lie on the simplex"));
        }
    }
    let mut hi = 0.0f64;
    let mut lo = f64::INFINITY;
    for (&s, &t) in pi_source.iter().zip(pi_target) {
        if s == 0.0 {
            if t > 0.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        let w = t / s;
        hi = hi.max(w);
        if w > 0.0 {
            lo = lo.min(w);
        }
    }
    Ok(hi / lo)
}

/// Affine scorer `w0 + w1 x1 + w2 x2`, class 1 when nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: [f64; 3],
}

impl LinearClassifier {
    pub fn score(&self, x: [f64; 2]) -> f64 {
        self.weights[0] + self.weights[1] * x[0] + self.weights[2] * x[1]
    }

    pub fn predict(&self, x: [f64; 2]) -> usize {
        usize::from(self.score(x) >= 0.0)
    }

    pub fn losses(&self, samples: &[LabeledSample]) -> Vec<f64> {
        samples
            .iter()
            .map(|s| f64::from(u8::from(self.predict(s.x) != s.y)))
            .collect()
    }
}

/// Ridge-penalized logistic regression by Newton's method.
pub fn fit_logistic(samples: &[LabeledSample], ridge: f64) -> Result<LinearClassifier> {
    if samples.is_empty() {
        return Err(domain("logistic fit needs data"));
    }
    if ridge.is_nan() || ridge <= 0.0 {
        return Err(domain("ridge penalty must be positive"));
    }
    let mut w = [0.0f64; 3];
    for _ in 0..100 {
        let mut grad = [ridge * w[0], ridge * w[1], ridge * w[2]];
        let mut hess = [[0.0f64; 3]; 3];
        for (i, row) in hess.iter_mut().enumerate() {
            row[i] = ridge;
        }
        for s in samples {
            let f = [1.0, s.x[0], s.x[1]];
            let z = w[0] * f[0] + w[1] * f[1] + w[2] * f[2];
            let p = 1.0 / (1.0 + (-z).exp());
            let r = p - s.y as f64;
            let c = (p * (1.0 - p)).max(1e-12);
            for a in 0..3 {
                grad[a] += r * f[a];
                for b in 0..3 {
                    hess[a][b] += c * f[a] * f[b];
                }
            }
        }
        let step =
            solve3(hess, grad).ok_or_else(|| crate::Error::Numeric("singular Hessian".into()))?;
        for k in 0..3 {
            w[k] -= step[k];
        }
        if step.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10 {
            break;
        }
    }
    Ok(LinearClassifier { weights: w })
}

#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
