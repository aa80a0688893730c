//! Closed-loop simulation of a follower against a leader replayed from data.
//!
//! The follower is integrated with the ballistic update: speed is advanced by
//! `a * dt` and floored at zero, and the position advances by the exact
//! displacement of the (clipped) constant acceleration over the step. The
//! leader's displacement uses the trapezoid of its recorded speeds, which is
//! exact for data produced by the same integrator.

use thiserror::Error;

use crate::physics::{ghr_formula, idm_acceleration_unchecked, GhrParams, IdmParams};
use crate::types::{CfEvent, KinematicState};

/// Default number of observed steps copied before the model takes over.
pub const DEFAULT_WARMUP: usize = 10;

/// Spacing is floored here after a collision so the run can continue.
pub const COLLISION_FLOOR: f64 = -0.01;

/// Smallest spacing handed to the physics policies.
const MIN_POLICY_SPACING: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("warmup {warmup} must be shorter than the event ({len} states)")]
    Warmup { warmup: usize, len: usize },
    #[error("model returned non-finite acceleration at step {step}")]
    NonFiniteAcceleration { step: usize },
}

/// Anything that maps the simulated history to the follower's next acceleration.
///
/// `history` always ends with the current state.
pub trait AccelerationPolicy {
    fn acceleration(&mut self, history: &[KinematicState], dt: f64) -> f64;
}

impl<F> AccelerationPolicy for F
where
    F: FnMut(&[KinematicState], f64) -> f64,
{
    fn acceleration(&mut self, history: &[KinematicState], dt: f64) -> f64 {
        self(history, dt)
    }
}

/// IDM with fixed parameters.
#[derive(Debug, Clone, Copy)]
pub struct IdmPolicy(pub IdmParams);

impl AccelerationPolicy for IdmPolicy {
    fn acceleration(&mut self, history: &[KinematicState], _dt: f64) -> f64 {
        let mut s = *history.last().expect("non-empty history");
        s.spacing = s.spacing.max(MIN_POLICY_SPACING);
        idm_acceleration_unchecked(&s, &self.0)
    }
}

/// GHR with fixed parameters. Before enough history exists the earliest
/// state stands in for the delayed one.
#[derive(Debug, Clone, Copy)]
pub struct GhrPolicy(pub GhrParams);

impl AccelerationPolicy for GhrPolicy {
    fn acceleration(&mut self, history: &[KinematicState], dt: f64) -> f64 {
        let t = history.len() - 1;
        let delayed = &history[t.saturating_sub(self.0.delay_steps(dt))];
        ghr_formula(
            history[t].v_fv,
            delayed.dv,
            delayed.spacing.max(MIN_POLICY_SPACING),
            &self.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Simulated follower states against the recorded leader.
    pub simulated: CfEvent,
    pub collided: bool,
    /// First step whose simulated spacing is `<= 0`.
    pub collision_index: Option<usize>,
}

/// Simulates `event` closed-loop under `policy`.
///
/// States `0..warmup` are copied from the observation (a warmup of zero is
/// treated as one, since the initial state is always observed). From index
/// `warmup - 1` onward the policy drives the follower; each simulated state's
/// `a_fv` holds the acceleration actually applied over the following step
/// (the last state holds the policy output at that state).
pub fn rollout<P: AccelerationPolicy + ?Sized>(
    event: &CfEvent,
    policy: &mut P,
    warmup: usize,
) -> Result<RolloutResult, RolloutError> {
    let n = event.states.len();
    let warm = warmup.max(1);
    if warm >= n {
        return Err(RolloutError::Warmup { warmup, len: n });
    }
    let dt = event.dt;
    let mut sim: Vec<KinematicState> = Vec::with_capacity(n);
    sim.extend_from_slice(&event.states[..warm]);

    let mut spacing = sim[warm - 1].spacing;
    let mut v = sim[warm - 1].v_fv;
    let mut collision_index = None;
    for t in (warm - 1)..(n - 1) {
        let a = policy.acceleration(&sim, dt);
        if !a.is_finite() {
            return Err(RolloutError::NonFiniteAcceleration { step: t });
        }
        let v_next = (v + a * dt).max(0.0);
        let a_eff = (v_next - v) / dt;
        let follower_dx = v * dt + 0.5 * a_eff * dt * dt;
        let vl = event.states[t].v_lv().max(0.0);
        let vl_next = event.states[t + 1].v_lv().max(0.0);
        let leader_dx = 0.5 * (vl + vl_next) * dt;

        spacing += leader_dx - follower_dx;
        if spacing <= 0.0 {
            if collision_index.is_none() {
                collision_index = Some(t + 1);
            }
            spacing = spacing.max(COLLISION_FLOOR);
        }
        sim[t].a_fv = a_eff;
        v = v_next;
        sim.push(KinematicState::new(spacing, v, v - vl_next, 0.0));
    }
    let last = n - 1;
    let a = policy.acceleration(&sim, dt);
    if !a.is_finite() {
        return Err(RolloutError::NonFiniteAcceleration { step: last });
    }
    sim[last].a_fv = a;

    let simulated = CfEvent {
        states: sim,
        ..event.clone()
    };
    Ok(RolloutResult {
        simulated,
        collided: collision_index.is_some(),
        collision_index,
    })
}

/// Replays a recorded acceleration sequence; used to check the integrator.
pub struct ReplayPolicy<'a> {
    pub accelerations: &'a [f64],
}

impl AccelerationPolicy for ReplayPolicy<'_> {
    fn acceleration(&mut self, history: &[KinematicState], _dt: f64) -> f64 {
        self.accelerations[history.len() - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Leader at constant speed `vl`, follower starting at `v0`.
    fn constant_leader(n: usize, spacing: f64, v0: f64, vl: f64) -> CfEvent {
        let states = (0..n)
            .map(|_| KinematicState::new(spacing, v0, v0 - vl, 0.0))
            .collect();
        CfEvent::new("d", "e", "l", 0.1, states)
    }

    #[test]
    fn zero_model_with_matched_speeds_keeps_spacing() {
        let ev = constant_leader(200, 25.0, 12.0, 12.0);
        let r = rollout(&ev, &mut |_: &[KinematicState], _| 0.0, 10).unwrap();
        for s in &r.simulated.states {
            assert!((s.spacing - 25.0).abs() < 1e-9);
        }
        assert!(!r.collided);
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let ev = constant_leader(11, 100.0, 0.0, 0.0);
        let r = rollout(&ev, &mut |_: &[KinematicState], _| 1.0, 1).unwrap();
        let last = r.simulated.states[10];
        assert!((last.v_fv - 1.0).abs() < 1e-12);
        assert!((last.spacing - 99.5).abs() < 1e-12);
        assert_eq!(r.simulated.states.len(), 11);
        assert_eq!(r.simulated.dt, 0.1);
    }

    #[test]
    fn speed_floor_at_zero() {
        // Leader creeping forward at 1 m/s; follower parked.
        let ev = constant_leader(50, 10.0, 0.0, 1.0);
        let r = rollout(&ev, &mut |_: &[KinematicState], _| -10.0, 1).unwrap();
        for (i, s) in r.simulated.states.iter().enumerate() {
            assert_eq!(s.v_fv, 0.0);
            assert!((s.spacing - (10.0 + 0.1 * i as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn collision_is_flagged_and_floored() {
        let ev = constant_leader(100, 5.0, 10.0, 0.0);
        let r = rollout(&ev, &mut |_: &[KinematicState], _| 0.0, 1).unwrap();
        assert!(r.collided);
        assert_eq!(r.collision_index, Some(5));
        assert!(r.simulated.states.iter().all(|s| s.spacing >= COLLISION_FLOOR));
        assert_eq!(r.simulated.states.len(), 100);
    }

    #[test]
    fn non_finite_acceleration_names_the_step() {
        let ev = constant_leader(30, 20.0, 5.0, 5.0);
        let mut calls = 0;
        let err = rollout(
            &ev,
            &mut |_: &[KinematicState], _| {
                calls += 1;
                if calls == 4 {
                    f64::NAN
                } else {
                    0.0
                }
            },
            10,
        )
        .unwrap_err();
        assert_eq!(err, RolloutError::NonFiniteAcceleration { step: 12 });
    }

    #[test]
    fn warmup_must_fit() {
        let ev = constant_leader(10, 20.0, 5.0, 5.0);
        assert!(rollout(&ev, &mut IdmPolicy(crate::physics::IdmBox::default().midpoint()), 10).is_err());
    }

    #[test]
    fn rollout_is_deterministic() {
        let ev = constant_leader(120, 15.0, 8.0, 10.0);
        let p = IdmPolicy(crate::physics::IdmBox::default().midpoint());
        let a = rollout(&ev, &mut p.clone(), 10).unwrap();
        let b = rollout(&ev, &mut p.clone(), 10).unwrap();
        assert_eq!(a, b);
    }
}
