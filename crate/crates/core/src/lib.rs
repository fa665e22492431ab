//! Anytime-valid detection of harmful distribution shift.
//!
//! A deployed predictor is monitored by comparing a time-uniform lower
//! confidence bound on its target risk against an upper confidence bound on
//! its source risk. An alarm fires once the lower bound exceeds the source
//! bound plus a tolerance; the probability of ever raising a false alarm is
//! at most `delta`.

pub mod baselines;
pub mod bounds;
pub mod changepoint;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod scenario;
pub mod seqtest;
pub mod simgen;

pub use error::{Error, Result};
