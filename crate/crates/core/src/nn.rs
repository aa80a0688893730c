//! LSTM network parameters, forward passes (plain and on a [`Tape`]),
//! optimizers and the binary parameter file format.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logistic, matvec, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("empty input window")]
    EmptyWindow,
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Magic bytes opening a parameter file.
pub const MAGIC: &[u8; 4] = b"MFW1";

/// Segment names in storage order.
pub const SEGMENT_NAMES: [&str; 14] = [
    "W_ii", "W_hi", "b_i", "W_if", "W_hf", "b_f", "W_ig", "W_hg", "b_g", "W_io", "W_ho", "b_o",
    "W_head", "b_head",
];

// Positions of each segment in `SEGMENT_NAMES`.
const GATE_I: usize = 0;
const GATE_F: usize = 3;
const GATE_G: usize = 6;
const GATE_O: usize = 9;
const HEAD_W: usize = 12;
const HEAD_B: usize = 13;

/// Layer sizes of the single-layer LSTM with a linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmArch {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl LstmArch {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    fn shapes(&self) -> [(usize, usize); 14] {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let gate = [(h, i), (h, h), (h, 1)];
        [
            gate[0], gate[1], gate[2], gate[0], gate[1], gate[2], gate[0], gate[1], gate[2], gate[0],
            gate[1], gate[2], (o, h), (o, 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a named segment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub data: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl ModelParams {
    /// All-zero LSTM parameters.
    pub fn zeros(arch: LstmArch) -> Self {
        let mut offset = 0;
        let segments = SEGMENT_NAMES
            .iter()
            .zip(arch.shapes())
            .map(|(name, (rows, cols))| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                s
            })
            .collect();
        Self {
            data: vec![0.0; offset],
            segments,
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per segment, forget-gate bias +1.
    pub fn init<R: Rng>(arch: LstmArch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for (k, seg) in p.segments.iter().enumerate() {
            let fan_in = if seg.cols == 1 { arch.hidden } else { seg.cols };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in &mut p.data[seg.range()] {
                *x = rng.random_range(-bound..bound);
            }
            if k == GATE_F + 2 {
                p.data[seg.range()].iter_mut().for_each(|x| *x = 1.0);
            }
        }
        p
    }

    /// Single-parameter-vector container, used for toy objectives.
    pub fn from_vector(name: &str, data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            segments: vec![Segment {
                name: name.to_string(),
                offset: 0,
                rows: n,
                cols: 1,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_data(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.data[s.range()])
    }

    pub fn segment_data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.segment(name)?.range();
        Some(&mut self.data[r])
    }

    /// Recovers the LSTM sizes from the segment table.
    pub fn arch(&self) -> Result<LstmArch, NnError> {
        let names: Vec<&str> = self.segments.iter().map(|s| s.name.as_str()).collect();
        if names != SEGMENT_NAMES {
            return Err(NnError::Format("segment table is not an LSTM layout".into()));
        }
        let arch = LstmArch::new(self.segments[0].cols, self.segments[0].rows, self.segments[HEAD_W].rows);
        for (seg, (r, c)) in self.segments.iter().zip(arch.shapes()) {
            if (seg.rows, seg.cols) != (r, c) {
                return Err(NnError::Shape {
                    expected: r * c,
                    found: seg.len(),
                });
            }
        }
        Ok(arch)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// One leaf per segment on `tape`.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.segments
            .iter()
            .map(|s| tape.leaf(self.data[s.range()].to_vec(), s.rows, s.cols))
            .collect()
    }

    /// Flattens per-segment vectors back into this layout.
    pub fn flatten(&self, parts: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (seg, part) in self.segments.iter().zip(parts) {
            out[seg.range()].copy_from_slice(part);
        }
        out
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            data,
            segments: self.segments.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.segments.len() as u32).to_le_bytes())?;
        for s in &self.segments {
            let name = s.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(s.offset as u64).to_le_bytes())?;
            w.write_all(&(s.rows as u32).to_le_bytes())?;
            w.write_all(&(s.cols as u32).to_le_bytes())?;
        }
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic bytes".into()));
        }
        let n_seg = read_u32(&mut r)? as usize;
        let mut segments = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
            let offset = read_u64(&mut r)? as usize;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            segments.push(Segment {
                name,
                offset,
                rows,
                cols,
            });
        }
        let n = read_u64(&mut r)? as usize;
        let total: usize = segments.iter().map(Segment::len).sum();
        if total != n || segments.iter().any(|s| s.offset + s.len() > n) {
            return Err(NnError::Format("segment table does not cover the data".into()));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NnError::Format("non-finite parameter".into()));
        }
        Ok(Self { data, segments })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Cell (long-term) and hidden (working) memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            cell: vec![0.0; hidden],
            hidden: vec![0.0; hidden],
        }
    }
}

fn affine(p: &ModelParams, arch: &LstmArch, gate: usize, x: &[f64], h: &[f64]) -> Vec<f64> {
    let d = &p.data;
    let s = &p.segments;
    let wx = matvec(&d[s[gate].range()], x, arch.hidden, arch.input);
    let wh = matvec(&d[s[gate + 1].range()], h, arch.hidden, arch.hidden);
    let b = &d[s[gate + 2].range()];
    wx.iter().zip(&wh).zip(b).map(|((a, c), b)| a + c + b).collect()
}

/// One gated recurrence step followed by the linear head.
pub fn lstm_step(
    x: &[f64],
    state: &LstmState,
    params: &ModelParams,
) -> Result<(Vec<f64>, LstmState), NnError> {
    let arch = params.arch()?;
    if x.len() != arch.input {
        return Err(NnError::Shape {
            expected: arch.input,
            found: x.len(),
        });
    }
    if state.cell.len() != arch.hidden || state.hidden.len() != arch.hidden {
        return Err(NnError::Shape {
            expected: arch.hidden,
            found: state.cell.len(),
        });
    }
    Ok(step_unchecked(x, state, params, &arch))
}

fn step_unchecked(x: &[f64], state: &LstmState, p: &ModelParams, arch: &LstmArch) -> (Vec<f64>, LstmState) {
    let i = affine(p, arch, GATE_I, x, &state.hidden);
    let f = affine(p, arch, GATE_F, x, &state.hidden);
    let g = affine(p, arch, GATE_G, x, &state.hidden);
    let o = affine(p, arch, GATE_O, x, &state.hidden);
    let mut cell = Vec::with_capacity(arch.hidden);
    let mut hidden = Vec::with_capacity(arch.hidden);
    for k in 0..arch.hidden {
        let c = logistic(f[k]) * state.cell[k] + logistic(i[k]) * g[k].tanh();
        cell.push(c);
        hidden.push(logistic(o[k]) * c.tanh());
    }
    let out = head(p, arch, &hidden);
    (out, LstmState { cell, hidden })
}

fn head(p: &ModelParams, arch: &LstmArch, hidden: &[f64]) -> Vec<f64> {
    let s = &p.segments;
    let mut out = matvec(&p.data[s[HEAD_W].range()], hidden, arch.output, arch.hidden);
    out.iter_mut().zip(&p.data[s[HEAD_B].range()]).for_each(|(o, b)| *o += b);
    out
}

/// Runs the window from a zero state and returns the head output at the last step.
pub fn forward_sequence(window: &[Vec<f64>], params: &ModelParams) -> Result<Vec<f64>, NnError> {
    if window.is_empty() {
        return Err(NnError::EmptyWindow);
    }
    let arch = params.arch()?;
    if let Some(bad) = window.iter().find(|x| x.len() != arch.input) {
        return Err(NnError::Shape {
            expected: arch.input,
            found: bad.len(),
        });
    }
    Ok(forward_unchecked(window.iter().map(|x| x.as_slice()), params, &arch))
}

/// Forward pass for callers that have already validated the shapes.
pub(crate) fn forward_unchecked<'a>(
    window: impl Iterator<Item = &'a [f64]>,
    params: &ModelParams,
    arch: &LstmArch,
) -> Vec<f64> {
    let mut state = LstmState::zeros(arch.hidden);
    let mut out = Vec::new();
    for x in window {
        let (o, s) = step_unchecked(x, &state, params, arch);
        out = o;
        state = s;
    }
    out
}

/// LSTM forward pass recorded on a tape. `vars` are the segment leaves from
/// [`ModelParams::to_tape`] (or any nodes with the same shapes).
pub fn tape_forward_sequence(tape: &mut Tape, vars: &[Var], window: &[Var]) -> Var {
    assert!(!window.is_empty(), "empty window");
    let mut hc: Option<(Var, Var)> = None;
    for &x in window {
        hc = Some(tape_step(tape, vars, x, hc));
    }
    let (h, _) = hc.expect("non-empty window");
    let wh = tape.matvec(vars[HEAD_W], h);
    tape.add(wh, vars[HEAD_B])
}

/// Batched forward pass: each element of `window` is an `(input, n)` matrix
/// holding one time step of `n` independent sequences. Returns the
/// `(output, n)` head values.
pub fn tape_forward_batch(tape: &mut Tape, vars: &[Var], window: &[Var]) -> Var {
    assert!(!window.is_empty(), "empty window");
    let n = tape.shape(window[0]).1;
    let mut hc: Option<(Var, Var)> = None;
    for &x in window {
        hc = Some(tape_step_with(tape, vars, x, hc, |t, w, x| t.matmul(w, x), |t, b| {
            t.broadcast_cols(b, n)
        }));
    }
    let (h, _) = hc.expect("non-empty window");
    let wh = tape.matmul(vars[HEAD_W], h);
    let b = tape.broadcast_cols(vars[HEAD_B], n);
    tape.add(wh, b)
}

/// One recurrence step on the tape; `None` is the zero initial state, whose
/// hidden and cell contributions are skipped.
fn tape_step(tape: &mut Tape, vars: &[Var], x: Var, hc: Option<(Var, Var)>) -> (Var, Var) {
    tape_step_with(tape, vars, x, hc, |t, w, x| t.matvec(w, x), |_, b| b)
}

fn tape_step_with(
    tape: &mut Tape,
    vars: &[Var],
    x: Var,
    hc: Option<(Var, Var)>,
    mul: impl Fn(&mut Tape, Var, Var) -> Var,
    bias: impl Fn(&mut Tape, Var) -> Var,
) -> (Var, Var) {
    let gate = |tape: &mut Tape, k: usize| {
        let wx = mul(tape, vars[k], x);
        let pre = match hc {
            Some((h, _)) => {
                let wh = mul(tape, vars[k + 1], h);
                tape.add(wx, wh)
            }
            None => wx,
        };
        let b = bias(tape, vars[k + 2]);
        tape.add(pre, b)
    };
    let ai = gate(tape, GATE_I);
    let ag = gate(tape, GATE_G);
    let ao = gate(tape, GATE_O);
    let i = tape.sigmoid(ai);
    let g = tape.tanh(ag);
    let o = tape.sigmoid(ao);
    let ig = tape.mul(i, g);
    let c = match hc {
        Some((_, c_prev)) => {
            let af = gate(tape, GATE_F);
            let f = tape.sigmoid(af);
            let fc = tape.mul(f, c_prev);
            tape.add(fc, ig)
        }
        None => ig,
    };
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Plain gradient step `theta - lr * g`.
pub fn sgd_step(theta: &[f64], g: &[f64], lr: f64) -> Vec<f64> {
    assert_eq!(theta.len(), g.len());
    theta.iter().zip(g).map(|(t, g)| t - lr * g).collect()
}

/// Adam moment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Bias-corrected Adam update applied in place.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        assert_eq!(theta.len(), g.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..theta.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_unit() -> ModelParams {
        ModelParams::zeros(LstmArch::new(1, 1, 1))
    }

    fn set(p: &mut ModelParams, name: &str, v: f64) {
        p.segment_data_mut(name).unwrap()[0] = v;
    }

    #[test]
    fn zero_params_give_zero_state_and_output() {
        let p = ModelParams::zeros(LstmArch::new(3, 4, 6));
        let (out, s) = lstm_step(&[0.3, -1.0, 2.0], &LstmState::zeros(4), &p).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        assert!(s.cell.iter().chain(&s.hidden).all(|&x| x == 0.0));
        let out = forward_sequence(&vec![vec![1.0, 2.0, 3.0]; 5], &p).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn saturated_gates_hand_evaluated() {
        let mut p = one_unit();
        for b in ["b_i", "b_f", "b_o"] {
            set(&mut p, b, 100.0);
        }
        set(&mut p, "W_ig", 1.0);
        let (_, s) = lstm_step(&[0.5], &LstmState::zeros(1), &p).unwrap();
        assert!((s.cell[0] - 0.5f64.tanh()).abs() < 1e-12);
        assert!((s.cell[0] - 0.4621).abs() < 1e-4);
        assert!((s.hidden[0] - 0.4319).abs() < 1e-4);
    }

    #[test]
    fn closed_forget_gate_discards_memory() {
        let mut p = one_unit();
        set(&mut p, "b_i", 100.0);
        set(&mut p, "b_f", -100.0);
        set(&mut p, "b_o", 100.0);
        set(&mut p, "W_ig", 1.0);
        let a = lstm_step(&[0.5], &LstmState { cell: vec![0.0], hidden: vec![0.0] }, &p).unwrap().1;
        let b = lstm_step(&[0.5], &LstmState { cell: vec![7.0], hidden: vec![0.0] }, &p).unwrap().1;
        assert!((a.cell[0] - b.cell[0]).abs() < 1e-9);
    }

    #[test]
    fn open_forget_closed_input_preserves_cell() {
        let mut p = one_unit();
        set(&mut p, "b_i", -1e4);
        set(&mut p, "b_f", 1e4);
        set(&mut p, "W_ig", 3.0);
        let prev = LstmState {
            cell: vec![0.731],
            hidden: vec![0.2],
        };
        let s = lstm_step(&[0.9], &prev, &p).unwrap().1;
        assert_eq!(s.cell[0], 0.731);
    }

    #[test]
    fn single_step_window_equals_lstm_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(LstmArch::new(3, 5, 2), &mut rng);
        let x = vec![0.1, -0.4, 0.9];
        let a = forward_sequence(&[x.clone()], &p).unwrap();
        let b = lstm_step(&x, &LstmState::zeros(5), &p).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn output_depends_on_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::init(LstmArch::new(3, 8, 1), &mut rng);
        let w: Vec<Vec<f64>> = (0..6).map(|k| vec![k as f64 * 0.3 - 0.5, (k as f64).sin(), 0.2]).collect();
        let mut rev = w.clone();
        rev.reverse();
        let a = forward_sequence(&w, &p).unwrap()[0];
        let b = forward_sequence(&rev, &p).unwrap()[0];
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::zeros(LstmArch::new(3, 4, 1));
        assert!(matches!(
            lstm_step(&[1.0], &LstmState::zeros(4), &p),
            Err(NnError::Shape { expected: 3, found: 1 })
        ));
        assert!(matches!(forward_sequence(&[], &p), Err(NnError::EmptyWindow)));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(LstmArch::new(3, 6, 4), &mut rng);
        let w: Vec<Vec<f64>> = (0..7).map(|k| vec![0.1 * k as f64, -0.2, (k as f64).cos()]).collect();
        let plain = forward_sequence(&w, &p).unwrap();
        let mut t = Tape::new();
        let vars = p.to_tape(&mut t);
        let xs: Vec<Var> = w.iter().map(|x| t.vector(x.clone())).collect();
        let out = tape_forward_sequence(&mut t, &vars, &xs);
        for (a, b) in t.value(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_forward_matches_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(LstmArch::new(3, 5, 2), &mut rng);
        let seqs: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|j| (0..6).map(|k| vec![0.1 * (j + k) as f64, (k as f64 - j as f64).sin(), 0.3]).collect())
            .collect();
        let mut t = Tape::new();
        let vars = p.to_tape(&mut t);
        let xs: Vec<Var> = (0..6)
            .map(|k| {
                let mut m = vec![0.0; 3 * 4];
                for (j, s) in seqs.iter().enumerate() {
                    for f in 0..3 {
                        m[f * 4 + j] = s[k][f];
                    }
                }
                t.leaf(m, 3, 4)
            })
            .collect();
        let out = tape_forward_batch(&mut t, &vars, &xs);
        assert_eq!(t.shape(out), (2, 4));
        for (j, s) in seqs.iter().enumerate() {
            let plain = forward_sequence(s, &p).unwrap();
            for r in 0..2 {
                assert!((t.value(out)[r * 4 + j] - plain[r]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn init_sets_forget_bias_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(LstmArch::new(3, 32, 6), &mut rng);
        assert!(p.segment_data("b_f").unwrap().iter().all(|&x| x == 1.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.segment_data("W_ii").unwrap().iter().all(|x| x.abs() <= bound));
        assert_eq!(p.len(), 4 * (32 * 3 + 32 * 32 + 32) + 6 * 32 + 6);
        assert_eq!(p.arch().unwrap(), LstmArch::new(3, 32, 6));
    }

    #[test]
    fn binary_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(LstmArch::new(3, 4, 6), &mut rng);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"MFW1");
        let q = ModelParams::read_from(bytes.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::read_from(bad.as_slice()).is_err());
        assert!(ModelParams::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn optimizer_examples() {
        assert_eq!(sgd_step(&[1.0, -2.0], &[5.0, 1.0], 0.0), vec![1.0, -2.0]);
        assert!((sgd_step(&[1.0], &[2.0], 0.1)[0] - 0.8).abs() < 1e-15);
        let mut theta = [1.0];
        let mut adam = Adam::new(1);
        adam.step(&mut theta, &[1.0], 0.001);
        // m_hat = 1, v_hat = 1 after bias correction.
        assert!((1.0 - theta[0] - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        let mut theta = [1.0];
        Adam::new(1).step(&mut theta, &[1.0], 0.0);
        assert_eq!(theta, [1.0]);
    }
}
