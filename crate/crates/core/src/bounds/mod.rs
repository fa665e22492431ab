//! Confidence bounds for the mean of a `[0, 1]`-valued stream.
//!
//! Two kinds of object live here:
//!
//! * fixed-sample upper bounds on a source risk ([`SourceBound`]), computed
//!   once from a holdout sample, and
//! * streaming confidence sequences ([`BoundState`]) whose lower/upper
//!   endpoints hold simultaneously over all times with probability `1 - delta`.
//!
//! The streaming families are predictably-mixed Hoeffding
//! ([`PmHoeffdingState`]), predictably-mixed empirical Bernstein
//! ([`PmEbState`]), betting ([`BettingState`]) and the conjugate-mixture
//! empirical Bernstein bound for running means ([`CmebState`]).
//!
//! Reported endpoints are clamped to `[0, 1]`; the `raw_*` accessors expose the
//! unclamped values.

mod betting;
mod cmeb;
mod hoeffding;
mod pmeb;

pub use betting::BettingState;
pub use cmeb::{cmeb_best_rho, cmeb_boundary, cmeb_log_mixture, CmebState};
pub use hoeffding::{hoeffding_fixed_upper, pmh_lambda, PmHoeffdingState};
pub use pmeb::{psi_e, PmEbState};

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, domain, Error, Result};

/// Default truncation constant `c` for bet sizes.
pub const DEFAULT_C_CAP: f64 = 0.5;
/// Default spacing of the betting grid over candidate means.
pub const DEFAULT_GRID_RESOLUTION: f64 = 1e-3;
/// Intrinsic time at which the CM-EB mixture is tuned to be tightest:
/// 100 observations at the largest possible variance of a `[0, 1]` variable.
pub const DEFAULT_CMEB_V_OPT: f64 = 25.0;

/// Version tag written into serialized bound states.
pub const STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMethod {
    /// Classic Hoeffding interval; fixed-sample only.
    FixedHoeffding,
    PmHoeffding,
    PmEmpiricalBernstein,
    Betting,
    Cmeb,
}

impl BoundMethod {
    pub const ALL: [BoundMethod; 5] = [
        BoundMethod::FixedHoeffding,
        BoundMethod::PmHoeffding,
        BoundMethod::PmEmpiricalBernstein,
        BoundMethod::Betting,
        BoundMethod::Cmeb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundMethod::FixedHoeffding => "hoeffding",
            BoundMethod::PmHoeffding => "pm-h",
            BoundMethod::PmEmpiricalBernstein => "pm-eb",
            BoundMethod::Betting => "betting",
            BoundMethod::Cmeb => "cm-eb",
        }
    }

    /// Whether the method yields a time-uniform confidence sequence.
    pub fn is_time_uniform(self) -> bool {
        !matches!(self, BoundMethod::FixedHoeffding)
    }

    /// CM-EB bounds the running mean of conditional expectations and so stays
    /// valid under drift; the others assume a common mean.
    pub fn allows_drift(self) -> bool {
        matches!(self, BoundMethod::Cmeb)
    }
}

impl std::str::FromStr for BoundMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hoeffding" | "fixed-hoeffding" | "h" => Ok(BoundMethod::FixedHoeffding),
            "pm-h" | "pmh" | "pm-hoeffding" => Ok(BoundMethod::PmHoeffding),
            "pm-eb" | "pmeb" | "pm-empirical-bernstein" => Ok(BoundMethod::PmEmpiricalBernstein),
            "betting" | "bet" => Ok(BoundMethod::Betting),
            "cm-eb" | "cmeb" => Ok(BoundMethod::Cmeb),
            other => Err(domain(format!("unknown bound method {other:?}"))),
        }
    }
}

impl std::fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Lower,
    Upper,
    /// Both endpoints, each at `delta / 2`.
    TwoSided,
}

impl Side {
    fn tracks_lower(self) -> bool {
        matches!(self, Side::Lower | Side::TwoSided)
    }

    fn tracks_upper(self) -> bool {
        matches!(self, Side::Upper | Side::TwoSided)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub delta: f64,
    pub method: BoundMethod,
    pub side: Side,
    pub c_cap: f64,
    pub grid_resolution: f64,
    /// CM-EB gamma-mixture parameter; `None` tunes it for [`DEFAULT_CMEB_V_OPT`].
    pub cmeb_rho: Option<f64>,
    /// Declared sample size; switches PM-EB and betting to their fixed-horizon rates.
    pub horizon: Option<u64>,
}

impl BoundConfig {
    pub fn new(method: BoundMethod, delta: f64) -> Result<Self> {
        let cfg = Self {
            delta,
            method,
            side: Side::TwoSided,
            c_cap: DEFAULT_C_CAP,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            cmeb_rho: None,
            horizon: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_side(mut self, side: Side) -> Self {
        self.side = side;
        self
    }

    pub fn with_c_cap(mut self, c: f64) -> Self {
        self.c_cap = c;
        self
    }

    pub fn with_grid_resolution(mut self, r: f64) -> Self {
        self.grid_resolution = r;
        self
    }

    pub fn with_cmeb_rho(mut self, rho: f64) -> Self {
        self.cmeb_rho = Some(rho);
        self
    }

    pub fn with_horizon(mut self, n: u64) -> Self {
        self.horizon = Some(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit(self.delta, "delta")?;
        check_open_unit(self.c_cap, "c_cap")?;
        if !(self.grid_resolution > 0.0 && self.grid_resolution <= 0.5) {
            return Err(domain(format!(
                "grid_resolution must lie in (0, 0.5], got {}",
                self.grid_resolution
            )));
        }
        if let Some(rho) = self.cmeb_rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(domain(format!("cmeb_rho must be positive, got {rho}")));
            }
        }
        if self.horizon == Some(0) {
            return Err(domain("horizon must be at least 1"));
        }
        Ok(())
    }

    /// Error budget spent on each tracked side.
    pub fn per_side_delta(&self) -> f64 {
        match self.side {
            Side::TwoSided => self.delta / 2.0,
            Side::Lower | Side::Upper => self.delta,
        }
    }

    /// Fresh streaming state for this configuration.
    pub fn start(&self) -> Result<BoundState> {
        self.validate()?;
        let d = self.per_side_delta();
        Ok(match self.method {
            BoundMethod::FixedHoeffding => {
                return Err(domain(
                    "fixed-sample Hoeffding has no time-uniform streaming form; use pm-h",
                ))
            }
            BoundMethod::PmHoeffding => BoundState::PmHoeffding(PmHoeffdingState::new(d)?),
            BoundMethod::PmEmpiricalBernstein => {
                BoundState::PmEb(PmEbState::new(d, self.c_cap, self.horizon)?)
            }
            BoundMethod::Betting => {
                let s = BettingState::new(
                    d,
                    self.c_cap,
                    self.grid_resolution,
                    self.side.tracks_lower(),
                    self.side.tracks_upper(),
                )?;
                BoundState::Betting(match self.horizon {
                    Some(n) => s.with_horizon(n)?,
                    None => s,
                })
            }
            BoundMethod::Cmeb => {
                let rho = self
                    .cmeb_rho
                    .unwrap_or_else(|| cmeb_best_rho(DEFAULT_CMEB_V_OPT, d));
                BoundState::Cmeb(CmebState::new(d, rho)?)
            }
        })
    }

    /// Upper confidence bound on the mean of a fixed sample at level `delta`.
    ///
    /// Sequential methods use the running intersection `min_t U_t` over the
    /// sample (PM-EB and betting with their fixed-horizon rates). The reported value is never
    /// below the empirical mean.
    pub fn upper_bound(&self, losses: &[f64]) -> Result<SourceBound> {
        self.validate()?;
        if losses.is_empty() {
            return Err(domain("upper bound needs a nonempty sample"));
        }
        for &z in losses {
            crate::error::check_unit(z, "loss")?;
        }
        let n = losses.len();
        let mean = losses.iter().sum::<f64>() / n as f64;
        let raw = match self.method {
            BoundMethod::FixedHoeffding => hoeffding_radius(n, self.delta) + mean,
            BoundMethod::PmHoeffding => {
                let mut s = PmHoeffdingState::new(self.delta)?;
                running_min_upper(losses, |z| {
                    s.observe(z)?;
                    Ok(s.raw_upper())
                })?
            }
            BoundMethod::PmEmpiricalBernstein => {
                let mut s = PmEbState::new(self.delta, self.c_cap, Some(n as u64))?;
                running_min_upper(losses, |z| {
                    s.observe(z)?;
                    Ok(s.raw_upper())
                })?
            }
            BoundMethod::Betting => {
                let mut s =
                    BettingState::new(self.delta, self.c_cap, self.grid_resolution, false, true)?
                        .with_horizon(n as u64)?;
                for &z in losses {
                    s.observe(z)?;
                }
                s.raw_upper()
            }
            BoundMethod::Cmeb => {
                let rho = self
                    .cmeb_rho
                    .unwrap_or_else(|| cmeb_best_rho(DEFAULT_CMEB_V_OPT, self.delta));
                let mut s = CmebState::new(self.delta, rho)?;
                for &z in losses {
                    s.observe(z)?;
                }
                s.try_raw_upper()?
            }
        };
        let value = raw.max(mean);
        Ok(SourceBound {
            value,
            empirical_mean: mean,
            eps_appr: value - mean,
            n_source: n,
            method: self.method,
            delta_s: self.delta,
        })
    }
}

fn running_min_upper(losses: &[f64], mut step: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for &z in losses {
        best = best.min(step(z)?);
    }
    Ok(best)
}

pub(crate) fn hoeffding_radius(n: usize, delta: f64) -> f64 {
    ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Fixed-sample upper confidence bound on a source risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceBound {
    /// `U_S = empirical_mean + eps_appr`.
    pub value: f64,
    pub empirical_mean: f64,
    pub eps_appr: f64,
    pub n_source: usize,
    pub method: BoundMethod,
    pub delta_s: f64,
}

/// Streaming confidence sequence for a mean in `[0, 1]`.
pub trait ConfidenceSequence {
    /// Feeds one observation; rejects values outside `[0, 1]`.
    fn observe(&mut self, z: f64) -> Result<()>;

    /// Number of observations processed.
    fn count(&self) -> u64;

    fn raw_lower(&self) -> f64;

    fn raw_upper(&self) -> f64;

    fn lower(&self) -> f64 {
        clamp_unit(self.raw_lower())
    }

    fn upper(&self) -> f64 {
        clamp_unit(self.raw_upper())
    }

    /// `raw_lower() > x`, possibly without computing the endpoint itself.
    fn lower_exceeds(&self, x: f64) -> bool {
        self.raw_lower() > x
    }
}

pub(crate) fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Any of the streaming families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum BoundState {
    PmHoeffding(PmHoeffdingState),
    PmEb(PmEbState),
    Betting(BettingState),
    Cmeb(CmebState),
}

impl BoundState {
    pub fn method(&self) -> BoundMethod {
        match self {
            BoundState::PmHoeffding(_) => BoundMethod::PmHoeffding,
            BoundState::PmEb(_) => BoundMethod::PmEmpiricalBernstein,
            BoundState::Betting(_) => BoundMethod::Betting,
            BoundState::Cmeb(_) => BoundMethod::Cmeb,
        }
    }

    fn inner(&self) -> &dyn ConfidenceSequence {
        match self {
            BoundState::PmHoeffding(s) => s,
            BoundState::PmEb(s) => s,
            BoundState::Betting(s) => s,
            BoundState::Cmeb(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn ConfidenceSequence {
        match self {
            BoundState::PmHoeffding(s) => s,
            BoundState::PmEb(s) => s,
            BoundState::Betting(s) => s,
            BoundState::Cmeb(s) => s,
        }
    }

    /// Serializes to a versioned JSON document. Floats round-trip exactly.
    pub fn to_document(&self) -> Result<String> {
        let doc = StateDocument {
            format: STATE_FORMAT.to_string(),
            version: STATE_FORMAT_VERSION,
            state: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let doc: StateDocument =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != STATE_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format {:?}",
                doc.format
            )));
        }
        if doc.version != STATE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported state version {}",
                doc.version
            )));
        }
        Ok(doc.state)
    }
}

const STATE_FORMAT: &str = "riskmon.bound-state";

#[derive(Serialize, Deserialize)]
struct StateDocument {
    format: String,
    version: u32,
    state: BoundState,
}

impl ConfidenceSequence for BoundState {
    fn observe(&mut self, z: f64) -> Result<()> {
        self.inner_mut().observe(z)
    }

    fn count(&self) -> u64 {
        self.inner().count()
    }

    fn raw_lower(&self) -> f64 {
        self.inner().raw_lower()
    }

    fn raw_upper(&self) -> f64 {
        self.inner().raw_upper()
    }

    fn lower_exceeds(&self, x: f64) -> bool {
        self.inner().lower_exceeds(x)
    }
}
