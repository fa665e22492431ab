//! Betting confidence sequence on a uniform grid of candidate means.
//!
//! For each grid value `m` two gamblers bet that the mean is above (`K+`) or
//! below (`K-`) `m`. Ville's inequality makes `{m : K+(m) < 1/delta}` a
//! time-uniform confidence set; `K+` is nonincreasing in `m`, so its left end
//! is found by binary search. Endpoints are rounded outward to the grid and
//! intersected over time.
//!
//! Capital is kept as `log_capital + ln(block)`, where `block` is a short
//! linear-space product that is folded into the log every [`FOLD_EVERY`]
//! steps. Each factor lies in `[1 - c, 1 + c / grid_step]`, so a block cannot
//! overflow.
//!
//! Grid values at or below the current lower endpoint (or at or above the
//! upper one) can no longer move the intersected bound and are not updated.

use serde::{Deserialize, Serialize};

use super::ConfidenceSequence;
use crate::error::{check_open_unit, check_unit, domain, Result};

const FOLD_EVERY: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BettingSnapshot", into = "BettingSnapshot")]
pub struct BettingState {
    snap: BettingSnapshot,
    // Derived from (cells, c_cap); rebuilt on deserialization.
    grid: Vec<f64>,
    cap_plus: Vec<f64>,
    cap_minus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BettingSnapshot {
    delta: f64,
    c_cap: f64,
    /// Number of grid cells; grid points are `i / cells` for `i = 0..=cells`.
    cells: usize,
    track_lower: bool,
    track_upper: bool,
    /// Declared sample size; switches to the fixed-horizon rate.
    #[serde(default)]
    horizon: Option<u64>,
    t: u64,
    sum_z: f64,
    sum_sq_dev: f64,
    mu_hat: f64,
    sigma2_hat: f64,
    steps_in_block: u32,
    log_capital_plus: Vec<f64>,
    block_plus: Vec<f64>,
    log_capital_minus: Vec<f64>,
    block_minus: Vec<f64>,
    /// Grid index of the intersected lower endpoint.
    lower_idx: usize,
    /// Grid index of the intersected upper endpoint.
    upper_idx: usize,
}

impl From<BettingSnapshot> for BettingState {
    fn from(snap: BettingSnapshot) -> Self {
        let (grid, cap_plus, cap_minus) = derived(snap.cells, snap.c_cap);
        Self {
            snap,
            grid,
            cap_plus,
            cap_minus,
        }
    }
}

impl From<BettingState> for BettingSnapshot {
    fn from(s: BettingState) -> Self {
        s.snap
    }
}

fn derived(cells: usize, c: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let grid: Vec<f64> = (0..=cells).map(|i| i as f64 / cells as f64).collect();
    let cap_plus = grid
        .iter()
        .map(|&m| if m > 0.0 { c / m } else { f64::INFINITY })
        .collect();
    let cap_minus = grid
        .iter()
        .map(|&m| {
            if m < 1.0 {
                c / (1.0 - m)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    (grid, cap_plus, cap_minus)
}

impl BettingState {
    pub fn new(
        delta: f64,
        c_cap: f64,
        grid_resolution: f64,
        track_lower: bool,
        track_upper: bool,
    ) -> Result<Self> {
        check_open_unit(delta, "delta")?;
        check_open_unit(c_cap, "c_cap")?;
        if !(grid_resolution > 0.0 && grid_resolution <= 0.5) {
            return Err(domain(format!(
                "grid_resolution {grid_resolution} not in (0, 0.5]"
            )));
        }
        if !track_lower && !track_upper {
            return Err(domain("betting state must track at least one side"));
        }
        let cells = (1.0 / grid_resolution).round().max(2.0) as usize;
        let len = cells + 1;
        let side = |on: bool| if on { vec![0.0; len] } else { Vec::new() };
        let ones = |on: bool| if on { vec![1.0; len] } else { Vec::new() };
        let snap = BettingSnapshot {
            delta,
            c_cap,
            cells,
            track_lower,
            track_upper,
            horizon: None,
            t: 0,
            sum_z: 0.0,
            sum_sq_dev: 0.0,
            mu_hat: 0.5,
            sigma2_hat: 0.25,
            steps_in_block: 0,
            log_capital_plus: side(track_lower),
            block_plus: ones(track_lower),
            log_capital_minus: side(track_upper),
            block_minus: ones(track_upper),
            lower_idx: 0,
            upper_idx: cells,
        };
        Ok(snap.into())
    }

    /// Uses `sqrt(2 log(1/delta) / (n sigma2))` in place of the streaming rate.
    pub fn with_horizon(mut self, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(domain("horizon must be at least 1"));
        }
        self.snap.horizon = Some(n);
        Ok(self)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Predictable rate shared by every grid point before capping.
    pub fn next_rate(&self) -> f64 {
        let log_term = 2.0 * (1.0 / self.snap.delta).ln();
        let scale = match self.snap.horizon {
            Some(n) => n as f64,
            None => {
                let t = (self.snap.t + 1) as f64;
                t * (1.0 + t).ln()
            }
        };
        (log_term / (self.snap.sigma2_hat * scale)).sqrt()
    }

    /// `log K+(m_i)` at the current time, or `None` when the point is not tracked.
    pub fn log_capital_plus(&self, i: usize) -> Option<f64> {
        let s = &self.snap;
        (s.track_lower && i > 0 && i < s.cells)
            .then(|| s.log_capital_plus[i] + s.block_plus[i].ln())
    }

    pub fn log_capital_minus(&self, i: usize) -> Option<f64> {
        let s = &self.snap;
        (s.track_upper && i > 0 && i < s.cells)
            .then(|| s.log_capital_minus[i] + s.block_minus[i].ln())
    }

    /// First grid index still updated on the plus side.
    pub fn active_plus_start(&self) -> usize {
        self.snap.lower_idx + 1
    }

    /// Last grid index still updated on the minus side.
    pub fn active_minus_end(&self) -> usize {
        self.snap.upper_idx.saturating_sub(1)
    }

    fn fold(&mut self) {
        let s = &mut self.snap;
        if s.track_lower {
            for i in s.lower_idx + 1..s.cells {
                s.log_capital_plus[i] += s.block_plus[i].ln();
                s.block_plus[i] = 1.0;
            }
        }
        if s.track_upper {
            for i in 1..s.upper_idx {
                s.log_capital_minus[i] += s.block_minus[i].ln();
                s.block_minus[i] = 1.0;
            }
        }
        s.steps_in_block = 0;
    }
}

impl ConfidenceSequence for BettingState {
    fn observe(&mut self, z: f64) -> Result<()> {
        check_unit(z, "loss")?;
        let rate = self.next_rate();
        let threshold = (1.0 / self.snap.delta).ln();
        let cells = self.snap.cells;

        if self.snap.track_lower {
            let start = self.snap.lower_idx + 1;
            let block = &mut self.snap.block_plus[start..cells];
            let grid = &self.grid[start..cells];
            let caps = &self.cap_plus[start..cells];
            for ((b, &m), &cap) in block.iter_mut().zip(grid).zip(caps) {
                *b *= 1.0 + rate.min(cap) * (z - m);
            }
            // First index in [start, cells) whose capital is below 1/delta; m = 1 always is.
            let log_k = |i: usize| self.snap.log_capital_plus[i] + self.snap.block_plus[i].ln();
            let (mut lo, mut hi) = (start, cells);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if log_k(mid) >= threshold {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            self.snap.lower_idx = lo - 1;
        }

        if self.snap.track_upper {
            let end = self.snap.upper_idx;
            let block = &mut self.snap.block_minus[1..end];
            let grid = &self.grid[1..end];
            let caps = &self.cap_minus[1..end];
            for ((b, &m), &cap) in block.iter_mut().zip(grid).zip(caps) {
                *b *= 1.0 - rate.min(cap) * (z - m);
            }
            // Last index in (0, end) whose capital is below 1/delta; m = 0 always is.
            let log_k = |i: usize| self.snap.log_capital_minus[i] + self.snap.block_minus[i].ln();
            let (mut lo, mut hi) = (1, end);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if log_k(mid) < threshold {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            // lo is the first index at or above the threshold, or `end`.
            self.snap.upper_idx = lo;
        }

        let s = &mut self.snap;
        s.t += 1;
        let t = s.t as f64;
        s.sum_z += z;
        s.mu_hat = (0.5 + s.sum_z) / (t + 1.0);
        let d = z - s.mu_hat;
        s.sum_sq_dev += d * d;
        s.sigma2_hat = (0.25 + s.sum_sq_dev) / (t + 1.0);
        s.steps_in_block += 1;
        if s.steps_in_block >= FOLD_EVERY {
            self.fold();
        }
        Ok(())
    }

    fn count(&self) -> u64 {
        self.snap.t
    }

    /// Running maximum of the grid-rounded lower endpoints; 0 if not tracked.
    fn raw_lower(&self) -> f64 {
        self.grid[self.snap.lower_idx]
    }

    /// Running minimum of the grid-rounded upper endpoints; 1 if not tracked.
    fn raw_upper(&self) -> f64 {
        self.grid[self.snap.upper_idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_sided(delta: f64) -> BettingState {
        BettingState::new(delta, 0.5, 1e-3, true, true).unwrap()
    }

    #[test]
    fn vacuous_before_data() {
        let s = two_sided(0.05);
        assert_eq!(s.lower(), 0.0);
        assert_eq!(s.upper(), 1.0);
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn all_ones_pushes_lower_above_point_nine() {
        let mut s = two_sided(0.05);
        let mut prev = 0.0;
        let mut hit = None;
        for t in 1..=100 {
            s.observe(1.0).unwrap();
            assert!(s.lower() >= prev);
            prev = s.lower();
            if hit.is_none() && s.lower() > 0.9 {
                hit = Some(t);
            }
        }
        assert!(hit.is_some(), "lower only reached {prev}");
    }

    #[test]
    fn running_intersection_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = two_sided(0.1);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..3000 {
            let z = if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 };
            s.observe(z).unwrap();
            assert!(s.lower() >= lo && s.upper() <= hi);
            assert!(s.lower() <= s.upper());
            lo = s.lower();
            hi = s.upper();
        }
        assert!(lo < 0.3 && hi > 0.3);
        assert!(hi - lo < 0.1);
    }

    #[test]
    fn capital_monotone_over_active_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = two_sided(0.05);
        for _ in 0..500 {
            s.observe(rng.random::<f64>()).unwrap();
            let plus: Vec<f64> = (s.active_plus_start()..s.snap.cells)
                .map(|i| s.log_capital_plus(i).unwrap())
                .collect();
            assert!(plus.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            let minus: Vec<f64> = (1..=s.active_minus_end())
                .map(|i| s.log_capital_minus(i).unwrap())
                .collect();
            assert!(minus.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            assert!(plus.iter().chain(&minus).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn horizon_rate_uses_sample_size() {
        let s = BettingState::new(0.05, 0.5, 0.01, false, true)
            .unwrap()
            .with_horizon(400)
            .unwrap();
        // sigma2_0 = 1/4 before any data
        let want = (2.0 * 20f64.ln() / (0.25 * 400.0)).sqrt();
        assert!((s.next_rate() - want).abs() < 1e-15);
        let streaming = BettingState::new(0.05, 0.5, 0.01, false, true).unwrap();
        assert!(
            (streaming.next_rate() - (2.0 * 20f64.ln() / (0.25 * 2f64.ln())).sqrt()).abs() < 1e-15
        );
        assert!(streaming.with_horizon(0).is_err());
    }

    #[test]
    fn fold_matches_direct_log_accumulation() {
        // Recompute K+ at a few grid points with explicit log1p products.
        let zs: Vec<f64> = (0..200).map(|i| ((i * 29) % 17) as f64 / 16.0).collect();
        let mut s = BettingState::new(0.05, 0.5, 0.01, true, false).unwrap();
        let probe = [50usize, 70, 90];
        let mut direct = [0.0f64; 3];
        for &z in &zs {
            let rate = s.next_rate();
            for (k, &i) in probe.iter().enumerate() {
                let m = i as f64 / 100.0;
                direct[k] += (rate.min(0.5 / m) * (z - m)).ln_1p();
            }
            s.observe(z).unwrap();
        }
        for (k, &i) in probe.iter().enumerate() {
            if i >= s.active_plus_start() {
                let got = s.log_capital_plus(i).unwrap();
                assert!((got - direct[k]).abs() < 1e-9, "{got} vs {}", direct[k]);
            }
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let mut s = two_sided(0.05);
        assert!(s.observe(1.01).is_err());
        assert!(BettingState::new(0.05, 0.5, 1e-3, false, false).is_err());
    }

    #[test]
    fn deterministic_across_clones() {
        let mut a = two_sided(0.05);
        for i in 0..77 {
            a.observe((i % 5) as f64 / 4.0).unwrap();
        }
        let mut b = a.clone();
        for i in 0..40 {
            let z = (i % 3) as f64 / 2.0;
            a.observe(z).unwrap();
            b.observe(z).unwrap();
        }
        assert_eq!(a, b);
    }
}
