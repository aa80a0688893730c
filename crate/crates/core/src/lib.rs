//! Personalized car-following modeling.
//!
//! Physics models (IDM, GHR), a closed-loop rollout simulator, a small
//! reverse-mode differentiation engine with an LSTM, the LSTM-to-IDM hybrid,
//! MAML meta-training, GA calibration, synthetic fleet generation and event
//! extraction, driving-style analysis, and the benchmark harness.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod ga;
pub mod meta;
pub mod nn;
pub mod physics;
pub mod pipeline;
pub mod pidl;
pub mod rollout;
pub mod style;
pub mod types;

pub use types::{CfEvent, DriverTask, KinematicState};
