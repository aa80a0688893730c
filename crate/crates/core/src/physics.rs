//! Closed-form car-following laws: the Intelligent Driver Model and the
//! Gazis-Herman-Rothery stimulus-response model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::KinematicState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("non-positive spacing {0} m")]
    NonPositiveSpacing(f64),
    #[error("parameter {name} = {value} outside [{lo}, {hi}]")]
    OutOfBox {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("GHR delay of {delay} steps needs history before index {t_index}")]
    InsufficientHistory { t_index: usize, delay: usize },
    #[error("invalid box for {0}: lower bound must not exceed upper bound")]
    InvalidBox(&'static str),
    #[error("non-finite input")]
    NonFinite,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// The six IDM constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub a0: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Desired speed, m/s.
    pub v_des: f64,
    /// Desired time headway, s.
    pub t_des: f64,
    /// Minimum standstill gap, m.
    pub s0: f64,
    /// Free-road exponent.
    pub lambda: f64,
}

impl IdmParams {
    pub const NAMES: [&'static str; 6] = ["a0", "b", "v_des", "t_des", "s0", "lambda"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.a0, self.b, self.v_des, self.t_des, self.s0, self.lambda]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            a0: x[0],
            b: x[1],
            v_des: x[2],
            t_des: x[3],
            s0: x[4],
            lambda: x[5],
        }
    }
}

/// Feasible box for [`IdmParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmBox {
    pub a0: Bounds,
    pub b: Bounds,
    pub v_des: Bounds,
    pub t_des: Bounds,
    pub s0: Bounds,
    pub lambda: Bounds,
}

impl Default for IdmBox {
    fn default() -> Self {
        Self {
            a0: Bounds::new(0.1, 5.0),
            b: Bounds::new(0.1, 5.0),
            v_des: Bounds::new(1.0, 42.0),
            t_des: Bounds::new(0.1, 5.0),
            s0: Bounds::new(0.1, 10.0),
            lambda: Bounds::new(1.0, 10.0),
        }
    }
}

impl IdmBox {
    pub fn to_array(&self) -> [Bounds; 6] {
        [self.a0, self.b, self.v_des, self.t_des, self.s0, self.lambda]
    }

    pub fn from_array(b: [Bounds; 6]) -> Self {
        Self {
            a0: b[0],
            b: b[1],
            v_des: b[2],
            t_des: b[3],
            s0: b[4],
            lambda: b[5],
        }
    }

    pub fn midpoint(&self) -> IdmParams {
        IdmParams::from_slice(&self.to_array().map(|b| b.midpoint()))
    }

    /// Strict validity: `lo < hi` everywhere and every lower bound positive.
    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (name, b) in IdmParams::NAMES.iter().zip(self.to_array()) {
            if !(b.lo < b.hi) || b.lo <= 0.0 {
                return Err(PhysicsError::InvalidBox(name));
            }
        }
        Ok(())
    }

    pub fn check(&self, p: &IdmParams) -> Result<(), PhysicsError> {
        for ((name, b), value) in IdmParams::NAMES.iter().zip(self.to_array()).zip(p.to_array()) {
            if !b.contains(value) {
                return Err(PhysicsError::OutOfBox {
                    name,
                    value,
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
        Ok(())
    }
}

/// IDM acceleration with the gap exponent fixed at 2.
///
/// Fails when spacing is not strictly positive or a parameter leaves `feasible`.
pub fn idm_acceleration(
    state: &KinematicState,
    p: &IdmParams,
    feasible: &IdmBox,
) -> Result<f64, PhysicsError> {
    if !state.is_finite() {
        return Err(PhysicsError::NonFinite);
    }
    if state.spacing <= 0.0 {
        return Err(PhysicsError::NonPositiveSpacing(state.spacing));
    }
    feasible.check(p)?;
    Ok(idm_acceleration_unchecked(state, p))
}

/// IDM formula without domain checks. Callers guarantee positive spacing and
/// positive parameters.
#[inline]
pub fn idm_acceleration_unchecked(state: &KinematicState, p: &IdmParams) -> f64 {
    let v = state.v_fv;
    let desired_gap = p.s0 + v * p.t_des + v * state.dv / (2.0 * (p.a0 * p.b).sqrt());
    let free = if v > 0.0 { (v / p.v_des).powf(p.lambda) } else { 0.0 };
    let gap = desired_gap / state.spacing;
    p.a0 * (1.0 - free - gap * gap)
}

/// Equilibrium gap at speed `v` with zero relative speed.
pub fn idm_equilibrium_spacing(v: f64, p: &IdmParams) -> f64 {
    let free = (v / p.v_des).powf(p.lambda);
    (p.s0 + v * p.t_des) / (1.0 - free).sqrt()
}

/// Gazis-Herman-Rothery parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhrParams {
    /// Sensitivity gain.
    pub c: f64,
    /// Speed exponent.
    pub m_exp: f64,
    /// Spacing exponent.
    pub l_exp: f64,
    /// Reaction delay in seconds.
    pub tau: f64,
}

impl GhrParams {
    pub const NAMES: [&'static str; 4] = ["c", "m_exp", "l_exp", "tau"];

    pub fn to_array(&self) -> [f64; 4] {
        [self.c, self.m_exp, self.l_exp, self.tau]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            c: x[0],
            m_exp: x[1],
            l_exp: x[2],
            tau: x[3],
        }
    }

    /// Delay as a whole number of steps; halves round down.
    pub fn delay_steps(&self, dt: f64) -> usize {
        quantize_delay(self.tau, dt)
    }
}

/// Rounds `tau / dt` to the nearest integer, resolving ties downward.
pub fn quantize_delay(tau: f64, dt: f64) -> usize {
    let steps = (tau / dt - 0.5).ceil();
    if steps <= 0.0 {
        0
    } else {
        steps as usize
    }
}

/// Feasible box for [`GhrParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhrBox {
    pub c: Bounds,
    pub m_exp: Bounds,
    pub l_exp: Bounds,
    pub tau: Bounds,
}

/// Gains closer to zero than this are excluded from the GHR box.
pub const GHR_MIN_ABS_GAIN: f64 = 1e-6;

impl Default for GhrBox {
    fn default() -> Self {
        Self {
            c: Bounds::new(-5.0, 5.0),
            m_exp: Bounds::new(-2.0, 2.0),
            l_exp: Bounds::new(0.0, 4.0),
            tau: Bounds::new(0.0, 2.0),
        }
    }
}

impl GhrBox {
    pub fn to_array(&self) -> [Bounds; 4] {
        [self.c, self.m_exp, self.l_exp, self.tau]
    }

    pub fn from_array(b: [Bounds; 4]) -> Self {
        Self {
            c: b[0],
            m_exp: b[1],
            l_exp: b[2],
            tau: b[3],
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (name, b) in GhrParams::NAMES.iter().zip(self.to_array()) {
            if !(b.lo < b.hi) {
                return Err(PhysicsError::InvalidBox(name));
            }
        }
        if self.l_exp.lo < 0.0 {
            return Err(PhysicsError::InvalidBox("l_exp"));
        }
        if self.tau.lo < 0.0 {
            return Err(PhysicsError::InvalidBox("tau"));
        }
        Ok(())
    }

    /// Pushes a gain inside the excluded band `|c| < 1e-6` out to its edge.
    pub fn repair_gain(c: f64) -> f64 {
        if c.abs() < GHR_MIN_ABS_GAIN {
            GHR_MIN_ABS_GAIN.copysign(if c == 0.0 { 1.0 } else { c })
        } else {
            c
        }
    }
}

/// Both boxes used by calibration and the hybrid model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FeasibleBox {
    pub idm: IdmBox,
    pub ghr: GhrBox,
}

impl FeasibleBox {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.idm.validate()?;
        self.ghr.validate()
    }
}

/// GHR acceleration at `t_index`:
/// `c * v(t)^m * (-dv(t - tau)) / spacing(t - tau)^l`.
///
/// A negative `dv` (leader pulling away) yields positive acceleration for
/// `c > 0`. Negative speed exponents evaluate the speed factor at no less
/// than 0.1 m/s so a stopped follower stays finite.
pub fn ghr_acceleration(
    history: &[KinematicState],
    t_index: usize,
    p: &GhrParams,
    dt: f64,
) -> Result<f64, PhysicsError> {
    let delay = p.delay_steps(dt);
    if t_index >= history.len() || t_index < delay {
        return Err(PhysicsError::InsufficientHistory { t_index, delay });
    }
    let now = &history[t_index];
    let past = &history[t_index - delay];
    if past.spacing <= 0.0 {
        return Err(PhysicsError::NonPositiveSpacing(past.spacing));
    }
    Ok(ghr_formula(now.v_fv, past.dv, past.spacing, p))
}

#[inline]
pub(crate) fn ghr_formula(v: f64, dv_delayed: f64, spacing_delayed: f64, p: &GhrParams) -> f64 {
    let stimulus = -dv_delayed;
    if stimulus == 0.0 {
        return 0.0;
    }
    let v = v.max(0.0);
    let speed_factor = if p.m_exp < 0.0 {
        v.max(0.1).powf(p.m_exp)
    } else {
        v.powf(p.m_exp)
    };
    p.c * speed_factor * stimulus / spacing_delayed.powf(p.l_exp)
}
