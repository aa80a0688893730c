//! The LSTM-to-IDM hybrid and its pure-LSTM counterpart.
//!
//! For the hybrid, the LSTM head emits six raw values per window. Each is
//! squashed into its feasible interval with a scaled logistic, giving a
//! time-varying set of IDM parameters, and IDM turns the last state of the
//! window into an acceleration. The pure-LSTM model reads the acceleration
//! straight off a one-unit head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logistic, AutodiffError, Tape, Var};
use crate::nn::{forward_unchecked, tape_forward_batch, tape_forward_sequence, Adam, LstmArch, ModelParams, NnError};
use crate::physics::{idm_acceleration, IdmBox, IdmParams, PhysicsError};
use crate::rollout::AccelerationPolicy;
use crate::types::{CfEvent, KinematicState};

/// Number of input features: spacing, follower speed, relative speed.
pub const N_FEATURES: usize = 3;
/// Default hidden width of the LSTM.
pub const DEFAULT_HIDDEN: usize = 32;
/// Default input window, in steps.
pub const DEFAULT_WINDOW: usize = 10;

/// Smallest spacing the hybrid evaluates IDM at during closed-loop rollouts.
const MIN_POLICY_SPACING: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PidlError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("event {event_id} has {len} states, window needs more than {window}")]
    EventTooShort {
        event_id: String,
        len: usize,
        window: usize,
    },
    #[error("feature {0} has zero spread; cannot standardize")]
    DegenerateFeature(&'static str),
    #[error("no training windows")]
    NoSamples,
    #[error("model expects {expected} outputs, parameters provide {found}")]
    OutputMismatch { expected: usize, found: usize },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
}

/// Per-feature standardization fit on training drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl FeatureScaler {
    pub const FEATURES: [&'static str; N_FEATURES] = ["spacing", "v_fv", "dv"];

    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    /// Mean and population standard deviation over every state of `events`.
    pub fn fit<'a>(events: impl IntoIterator<Item = &'a CfEvent>) -> Result<Self, PidlError> {
        let mut n = 0.0;
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        for e in events {
            for s in &e.states {
                let f = [s.spacing, s.v_fv, s.dv];
                for k in 0..N_FEATURES {
                    sum[k] += f[k];
                    sq[k] += f[k] * f[k];
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(PidlError::NoSamples);
        }
        let mut mean = [0.0; N_FEATURES];
        let mut std = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            mean[k] = sum[k] / n;
            let var = (sq[k] / n - mean[k] * mean[k]).max(0.0);
            std[k] = var.sqrt();
            if !(std[k] > 1e-12) {
                return Err(PidlError::DegenerateFeature(Self::FEATURES[k]));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, s: &KinematicState) -> [f64; N_FEATURES] {
        let f = [s.spacing, s.v_fv, s.dv];
        let mut out = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            out[k] = (f[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

/// Which network sits behind a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// LSTM emitting IDM parameters.
    Pidl,
    /// LSTM emitting the acceleration directly.
    Lstm,
}

impl ModelKind {
    pub fn outputs(self) -> usize {
        match self {
            ModelKind::Pidl => 6,
            ModelKind::Lstm => 1,
        }
    }
}

/// Everything besides the weights needed to run a network; stored as the JSON
/// sidecar of a parameter file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub hidden: usize,
    pub window: usize,
    pub scaler: FeatureScaler,
    pub idm_box: IdmBox,
}

impl NetworkSpec {
    pub fn arch(&self) -> LstmArch {
        LstmArch::new(N_FEATURES, self.hidden, self.kind.outputs())
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(self.arch(), &mut rng)
    }

    /// Fails unless `theta` has the architecture this spec describes.
    pub fn check_params(&self, theta: &ModelParams) -> Result<LstmArch, PidlError> {
        let arch = theta.arch()?;
        if arch.output != self.kind.outputs() {
            return Err(PidlError::OutputMismatch {
                expected: self.kind.outputs(),
                found: arch.output,
            });
        }
        if arch.input != N_FEATURES {
            return Err(NnError::Shape {
                expected: N_FEATURES,
                found: arch.input,
            }
            .into());
        }
        Ok(arch)
    }
}

/// Parameters squashed into the open box: `lo + (hi - lo) * logistic(raw)`.
pub fn squash_params(raw: &[f64], b: &IdmBox) -> IdmParams {
    let bounds = b.to_array();
    let mut p = [0.0; 6];
    for k in 0..6 {
        p[k] = bounds[k].lo + bounds[k].width() * logistic(raw[k]);
    }
    IdmParams::from_slice(&p)
}

/// Emitted parameters and resulting acceleration for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidlOutput {
    pub params: IdmParams,
    pub accel: f64,
}

fn features(window: &[KinematicState], scaler: &FeatureScaler) -> Vec<[f64; N_FEATURES]> {
    window.iter().map(|s| scaler.transform(s)).collect()
}

/// Hybrid forward pass: standardize, run the LSTM, squash into `idm_box`,
/// evaluate IDM at the last state.
pub fn pidl_forward(
    window: &[KinematicState],
    theta: &ModelParams,
    scaler: &FeatureScaler,
    idm_box: &IdmBox,
) -> Result<PidlOutput, PidlError> {
    let arch = theta.arch()?;
    if window.is_empty() {
        return Err(NnError::EmptyWindow.into());
    }
    if arch.output != 6 || arch.input != N_FEATURES {
        return Err(PidlError::OutputMismatch {
            expected: 6,
            found: arch.output,
        });
    }
    let feats = features(window, scaler);
    let raw = forward_unchecked(feats.iter().map(|f| f.as_slice()), theta, &arch);
    let params = squash_params(&raw, idm_box);
    let accel = idm_acceleration(window.last().unwrap(), &params, idm_box)?;
    Ok(PidlOutput { params, accel })
}

/// Predicted acceleration for either model kind. The hybrid evaluates IDM at
/// a spacing no smaller than 0.01 m so it stays defined after a collision.
pub fn predict(spec: &NetworkSpec, theta: &ModelParams, window: &[KinematicState]) -> f64 {
    let arch = spec.arch();
    let feats = features(window, &spec.scaler);
    let raw = forward_unchecked(feats.iter().map(|f| f.as_slice()), theta, &arch);
    match spec.kind {
        ModelKind::Lstm => raw[0],
        ModelKind::Pidl => {
            let params = squash_params(&raw, &spec.idm_box);
            let mut last = *window.last().unwrap();
            last.spacing = last.spacing.max(MIN_POLICY_SPACING);
            crate::physics::idm_acceleration_unchecked(&last, &params)
        }
    }
}

/// A trained network driving the follower in a rollout.
pub struct NetworkPolicy<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a ModelParams,
}

impl AccelerationPolicy for NetworkPolicy<'_> {
    fn acceleration(&mut self, history: &[KinematicState], _dt: f64) -> f64 {
        let start = history.len().saturating_sub(self.spec.window);
        predict(self.spec, self.params, &history[start..])
    }
}

/// One teacher-forced training example: a standardized window of observed
/// states and the acceleration observed at its last step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<[f64; N_FEATURES]>,
    pub last: KinematicState,
    pub target: f64,
}

/// Sliding windows over every event, every `stride` steps.
pub fn make_samples(
    events: &[CfEvent],
    window: usize,
    stride: usize,
    scaler: &FeatureScaler,
) -> Result<Vec<Sample>, PidlError> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for e in events {
        if e.states.len() <= window {
            return Err(PidlError::EventTooShort {
                event_id: e.event_id.clone(),
                len: e.states.len(),
                window,
            });
        }
        let mut t = window - 1;
        while t < e.states.len() {
            let w = &e.states[t + 1 - window..=t];
            out.push(Sample {
                features: features(w, scaler),
                last: e.states[t],
                target: e.states[t].a_fv,
            });
            t += stride;
        }
    }
    Ok(out)
}

/// Prediction for a prepared sample.
pub fn predict_sample(spec: &NetworkSpec, theta: &ModelParams, sample: &Sample) -> f64 {
    let arch = spec.arch();
    let raw = forward_unchecked(sample.features.iter().map(|f| f.as_slice()), theta, &arch);
    match spec.kind {
        ModelKind::Lstm => raw[0],
        ModelKind::Pidl => {
            let params = squash_params(&raw, &spec.idm_box);
            crate::physics::idm_acceleration_unchecked(&sample.last, &params)
        }
    }
}

/// Mean squared acceleration error over `samples` without recording a tape.
pub fn sample_loss(spec: &NetworkSpec, theta: &ModelParams, samples: &[Sample]) -> Result<f64, PidlError> {
    if samples.is_empty() {
        return Err(PidlError::NoSamples);
    }
    spec.check_params(theta)?;
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let e = predict_sample(spec, theta, s) - s.target;
            e * e
        })
        .sum();
    Ok(sum / samples.len() as f64)
}

/// Mean squared error between observed and predicted accelerations over every
/// sliding window (stride 1) of every event, teacher-forced.
pub fn pidl_loss(
    events: &[CfEvent],
    theta: &ModelParams,
    scaler: &FeatureScaler,
    idm_box: &IdmBox,
    window: usize,
) -> Result<f64, PidlError> {
    let spec = NetworkSpec {
        kind: ModelKind::Pidl,
        hidden: theta.arch()?.hidden,
        window,
        scaler: *scaler,
        idm_box: *idm_box,
    };
    let samples = make_samples(events, window, 1, scaler)?;
    sample_loss(&spec, theta, &samples)
}

/// IDM evaluated on the tape from the six raw head outputs.
fn tape_idm(tape: &mut Tape, raw: Var, state: &KinematicState, b: &IdmBox) -> Var {
    let sig = tape.sigmoid(raw);
    let bounds = b.to_array();
    let mut p = [raw; 6];
    for (k, slot) in p.iter_mut().enumerate() {
        let s = tape.index(sig, k);
        let w = tape.scale(s, bounds[k].width());
        *slot = tape.add_const(w, bounds[k].lo);
    }
    let [a0, bb, v_des, t_des, s0, lambda] = p;
    let v = state.v_fv;

    let vt = tape.scale(t_des, v);
    let mut desired = tape.add(s0, vt);
    let num = v * state.dv / 2.0;
    if num != 0.0 {
        let ab = tape.mul(a0, bb);
        let root = tape.sqrt(ab);
        let c = tape.constant(num);
        let term = tape.div(c, root);
        desired = tape.add(desired, term);
    }
    let ratio = tape.scale(desired, 1.0 / state.spacing);
    let ratio2 = tape.mul(ratio, ratio);
    let mut bracket = tape.neg(ratio2);
    if v > 0.0 {
        let ln_vdes = tape.ln(v_des);
        let neg = tape.neg(ln_vdes);
        let log_ratio = tape.add_const(neg, v.ln());
        let expo = tape.mul(lambda, log_ratio);
        let free = tape.exp(expo);
        bracket = tape.sub(bracket, free);
    }
    let bracket = tape.add_const(bracket, 1.0);
    tape.mul(a0, bracket)
}

/// Model output for one sample, recorded on the tape.
pub fn tape_predict(tape: &mut Tape, vars: &[Var], spec: &NetworkSpec, sample: &Sample) -> Var {
    let xs: Vec<Var> = sample.features.iter().map(|f| tape.vector(f.to_vec())).collect();
    let out = tape_forward_sequence(tape, vars, &xs);
    match spec.kind {
        ModelKind::Lstm => out,
        ModelKind::Pidl => tape_idm(tape, out, &sample.last, &spec.idm_box),
    }
}

/// Mean squared acceleration error recorded on the tape. Samples with equal
/// window length are processed as one batch per time step.
pub fn tape_loss(tape: &mut Tape, vars: &[Var], spec: &NetworkSpec, samples: &[Sample]) -> Var {
    assert!(!samples.is_empty(), "loss over no samples");
    let mut groups: std::collections::BTreeMap<usize, Vec<&Sample>> = Default::default();
    for s in samples {
        groups.entry(s.features.len()).or_default().push(s);
    }
    let mut total: Option<Var> = None;
    for group in groups.values() {
        let sq = tape_batch_sq_error(tape, vars, spec, group);
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    tape.scale(total.unwrap(), 1.0 / samples.len() as f64)
}

/// Row `(1, n)` leaf built from one value per sample.
fn row_leaf(tape: &mut Tape, samples: &[&Sample], f: impl Fn(&Sample) -> f64) -> Var {
    let n = samples.len();
    tape.leaf(samples.iter().map(|s| f(s)).collect(), 1, n)
}

/// Summed squared error of a group of samples with equal window length.
fn tape_batch_sq_error(tape: &mut Tape, vars: &[Var], spec: &NetworkSpec, samples: &[&Sample]) -> Var {
    let n = samples.len();
    let steps = samples[0].features.len();
    let xs: Vec<Var> = (0..steps)
        .map(|k| {
            let mut m = vec![0.0; N_FEATURES * n];
            for (j, s) in samples.iter().enumerate() {
                for f in 0..N_FEATURES {
                    m[f * n + j] = s.features[k][f];
                }
            }
            tape.leaf(m, N_FEATURES, n)
        })
        .collect();
    let out = tape_forward_batch(tape, vars, &xs);
    let pred = match spec.kind {
        ModelKind::Lstm => out,
        ModelKind::Pidl => tape_idm_batch(tape, out, samples, &spec.idm_box),
    };
    let target = row_leaf(tape, samples, |s| s.target);
    let err = tape.sub(pred, target);
    let sq = tape.mul(err, err);
    tape.sum(sq)
}

/// IDM over a batch: `raw` is `(6, n)`, one column per sample.
fn tape_idm_batch(tape: &mut Tape, raw: Var, samples: &[&Sample], b: &IdmBox) -> Var {
    let sig = tape.sigmoid(raw);
    let bounds = b.to_array();
    let mut p = [raw; 6];
    for (k, slot) in p.iter_mut().enumerate() {
        let s = tape.row(sig, k);
        let w = tape.scale(s, bounds[k].width());
        *slot = tape.add_const(w, bounds[k].lo);
    }
    let [a0, bb, v_des, t_des, s0, lambda] = p;
    let v = row_leaf(tape, samples, |s| s.last.v_fv);
    let half_vdv = row_leaf(tape, samples, |s| s.last.v_fv * s.last.dv / 2.0);
    let inv_s = row_leaf(tape, samples, |s| 1.0 / s.last.spacing);
    // ln v with v = 1 where the free term vanishes, masked afterwards.
    let ln_v = row_leaf(tape, samples, |s| if s.last.v_fv > 0.0 { s.last.v_fv.ln() } else { 0.0 });
    let moving = row_leaf(tape, samples, |s| if s.last.v_fv > 0.0 { 1.0 } else { 0.0 });

    let vt = tape.mul(t_des, v);
    let ab = tape.mul(a0, bb);
    let root = tape.sqrt(ab);
    let term = tape.div(half_vdv, root);
    let d0 = tape.add(s0, vt);
    let desired = tape.add(d0, term);
    let ratio = tape.mul(desired, inv_s);
    let ratio2 = tape.mul(ratio, ratio);
    let ln_vdes = tape.ln(v_des);
    let log_ratio = tape.sub(ln_v, ln_vdes);
    let expo = tape.mul(lambda, log_ratio);
    let free_all = tape.exp(expo);
    let free = tape.mul(free_all, moving);
    let both = tape.add(free, ratio2);
    let nb = tape.neg(both);
    let bracket = tape.add_const(nb, 1.0);
    tape.mul(a0, bracket)
}

/// Loss and flat gradient over `samples`.
pub fn loss_and_grad(
    spec: &NetworkSpec,
    theta: &ModelParams,
    samples: &[Sample],
) -> Result<(f64, Vec<f64>), PidlError> {
    if samples.is_empty() {
        return Err(PidlError::NoSamples);
    }
    spec.check_params(theta)?;
    let mut tape = Tape::new();
    let vars = theta.to_tape(&mut tape);
    let loss = tape_loss(&mut tape, &vars, spec, samples);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(PidlError::NonFiniteLoss(value));
    }
    let parts = tape.backward(loss, &vars)?;
    Ok((value, theta.flatten(&parts)))
}

/// Minibatch Adam settings for supervised (non-meta) training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Adam on shuffled minibatches; returns the trained parameters and the
/// per-step minibatch loss.
pub fn train_supervised(
    spec: &NetworkSpec,
    theta0: &ModelParams,
    samples: &[Sample],
    cfg: &SupervisedConfig,
) -> Result<(ModelParams, Vec<f64>), PidlError> {
    if samples.is_empty() {
        return Err(PidlError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut theta = theta0.clone();
    let mut adam = Adam::new(theta.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.clamp(1, samples.len());
    for _ in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mb: Vec<Sample> = order[cursor..cursor + batch].iter().map(|&i| samples[i].clone()).collect();
        cursor += batch;
        let (loss, g) = loss_and_grad(spec, &theta, &mb)?;
        adam.step(&mut theta.data, &g, cfg.lr);
        trace.push(loss);
    }
    Ok((theta, trace))
}
