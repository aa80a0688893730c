//! Shared domain types: kinematic states, car-following events and driver tasks.
//!
//! All quantities are SI. Relative speed follows `dv = v_fv - v_lv`, so a
//! positive `dv` means the follower is closing in on its leader.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default sampling interval in seconds (10 Hz).
pub const DEFAULT_DT: f64 = 0.1;

/// One timestep of a follower/leader pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    /// Bumper-to-bumper gap in meters.
    pub spacing: f64,
    /// Follower speed in m/s.
    pub v_fv: f64,
    /// Relative speed `v_fv - v_lv` in m/s.
    pub dv: f64,
    /// Follower acceleration in m/s².
    pub a_fv: f64,
}

impl KinematicState {
    pub fn new(spacing: f64, v_fv: f64, dv: f64, a_fv: f64) -> Self {
        Self {
            spacing,
            v_fv,
            dv,
            a_fv,
        }
    }

    /// Leader speed recovered from the follower speed and relative speed.
    #[inline]
    pub fn v_lv(&self) -> f64 {
        self.v_fv - self.dv
    }

    pub fn is_finite(&self) -> bool {
        self.spacing.is_finite() && self.v_fv.is_finite() && self.dv.is_finite() && self.a_fv.is_finite()
    }
}

/// A time-ordered car-following event sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfEvent {
    pub driver_id: String,
    pub event_id: String,
    pub lv_id: String,
    /// Sampling interval in seconds.
    pub dt: f64,
    /// Timestamp of the first state, seconds.
    #[serde(default)]
    pub t0: f64,
    pub states: Vec<KinematicState>,
    /// Lateral offset between leader and follower per timestep, meters.
    #[serde(default)]
    pub lateral_offset: Option<Vec<f64>>,
    /// Leader identity per timestep when the source tracks leader switches.
    #[serde(default)]
    pub lv_track: Option<Vec<String>>,
}

impl CfEvent {
    pub fn new(
        driver_id: impl Into<String>,
        event_id: impl Into<String>,
        lv_id: impl Into<String>,
        dt: f64,
        states: Vec<KinematicState>,
    ) -> Self {
        Self {
            driver_id: driver_id.into(),
            event_id: event_id.into(),
            lv_id: lv_id.into(),
            dt,
            t0: 0.0,
            states,
            lateral_offset: None,
            lv_track: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(len - 1) * dt`.
    pub fn duration(&self) -> f64 {
        self.states.len().saturating_sub(1) as f64 * self.dt
    }

    /// Timestamp of state `index`.
    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }
}

/// One meta-learning task: a driver's events split into support and query sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverTask {
    pub driver_id: String,
    pub support: Vec<CfEvent>,
    pub query: Vec<CfEvent>,
}

impl DriverTask {
    /// Checks that both sets are non-empty and share no event id.
    pub fn check(&self) -> Result<(), String> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(format!("task {}: support and query must be non-empty", self.driver_id));
        }
        let ids: HashSet<&str> = self.support.iter().map(|e| e.event_id.as_str()).collect();
        if let Some(dup) = self.query.iter().find(|e| ids.contains(e.event_id.as_str())) {
            return Err(format!(
                "task {}: event {} appears in both support and query",
                self.driver_id, dup.event_id
            ));
        }
        Ok(())
    }
}

/// Tolerances used by [`validate_event`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Minimum number of states.
    pub min_len: usize,
    /// Tolerance when checking the leader speed for negativity.
    pub speed_tolerance: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            min_len: 2,
            speed_tolerance: 1e-9,
        }
    }
}

/// A single broken invariant found by [`validate_event`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    TooShort { len: usize },
    NonPositiveDt,
    NonFinite { index: usize },
    NegativeSpacing { index: usize },
    NegativeSpeed { index: usize },
    NegativeLeaderSpeed { index: usize },
    LateralLengthMismatch { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooShort { len } => write!(f, "too-short (len {len})"),
            Violation::NonPositiveDt => write!(f, "non-positive-dt"),
            Violation::NonFinite { index } => write!(f, "non-finite at index {index}"),
            Violation::NegativeSpacing { index } => write!(f, "negative-spacing at index {index}"),
            Violation::NegativeSpeed { index } => write!(f, "negative-speed at index {index}"),
            Violation::NegativeLeaderSpeed { index } => {
                write!(f, "negative-leader-speed at index {index}")
            }
            Violation::LateralLengthMismatch { expected, found } => {
                write!(f, "lateral-length-mismatch (expected {expected}, found {found})")
            }
        }
    }
}

/// Lists every invariant the event breaks; an empty list means the event is valid.
///
/// Spacing must be strictly positive at every step; a zero gap is reported as
/// `NegativeSpacing`.
pub fn validate_event(event: &CfEvent, config: &ValidationConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if event.states.len() < config.min_len.max(2) {
        out.push(Violation::TooShort {
            len: event.states.len(),
        });
    }
    if !(event.dt > 0.0 && event.dt.is_finite()) {
        out.push(Violation::NonPositiveDt);
    }
    for (index, s) in event.states.iter().enumerate() {
        if !s.is_finite() {
            out.push(Violation::NonFinite { index });
            continue;
        }
        if s.spacing <= 0.0 {
            out.push(Violation::NegativeSpacing { index });
        }
        if s.v_fv < 0.0 {
            out.push(Violation::NegativeSpeed { index });
        }
        if s.v_lv() < -config.speed_tolerance {
            out.push(Violation::NegativeLeaderSpeed { index });
        }
    }
    if let Some(lat) = &event.lateral_offset {
        if lat.len() != event.states.len() {
            out.push(Violation::LateralLengthMismatch {
                expected: event.states.len(),
                found: lat.len(),
            });
        }
    }
    out
}
