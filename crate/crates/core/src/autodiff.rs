//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation as a node holding its value. Node
//! indices are assigned in creation order, so walking the indices backwards is
//! a reverse topological order and each node is visited once.
//!
//! Two backward passes are provided:
//!
//! * [`Tape::backward`] computes plain numeric gradients.
//! * [`Tape::backward_graph`] records the backward pass itself on the tape, so
//!   the returned gradients are ordinary [`Var`]s that can be differentiated
//!   again. Gradient-through-gradient is what exact second-order
//!   meta-learning needs.
//!
//! Tensors are row-major matrices; a vector of length `n` has shape `(n, 1)`
//! and a scalar has shape `(1, 1)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("non-finite value at node {node} ({op})")]
    NonFiniteValue { node: usize, op: &'static str },
    #[error("output node {0} is not a scalar")]
    NonScalarOutput(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `W x` with `W: (m, n)`, `x: (n, 1)`.
    MatVec(Var, Var),
    /// `W^T u` with `W: (m, n)`, `u: (m, 1)`.
    MatTVec(Var, Var),
    /// `a b^T` with `a: (m, 1)`, `b: (n, 1)`.
    Outer(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sum(Var),
    Broadcast(Var),
    Index(Var, usize),
    Scatter(Var, usize),
    /// `A B` with `A: (m, k)`, `B: (k, n)`.
    MatMul(Var, Var),
    /// `A B^T` with `A: (m, k)`, `B: (n, k)`.
    MatMulNT(Var, Var),
    /// `A^T B` with `A: (k, m)`, `B: (k, n)`.
    MatMulTN(Var, Var),
    /// Column `(m, 1)` repeated into `(m, n)`.
    BroadcastCols(Var),
    /// Sum of each row, `(m, n)` to `(m, 1)`.
    RowSum(Var),
    /// Row `k` of a matrix, as `(1, n)`.
    Row(Var, usize),
    /// `(1, n)` placed as row `k` of an otherwise zero matrix.
    ScatterRow(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MatVec(..) => "matvec",
            Op::MatTVec(..) => "mattvec",
            Op::Outer(..) => "outer",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::Index(..) => "index",
            Op::Scatter(..) => "scatter",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::MatMulTN(..) => "matmul_tn",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::RowSum(..) => "row_sum",
            Op::Row(..) => "row",
            Op::ScatterRow(..) => "scatter_row",
        }
    }

    fn parents(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatVec(a, b)
            | Op::MatTVec(a, b)
            | Op::Outer(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::MatMulTN(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Broadcast(a, ..)
            | Op::Index(a, _)
            | Op::Scatter(a, ..)
            | Op::BroadcastCols(a)
            | Op::RowSum(a)
            | Op::Row(a, _)
            | Op::ScatterRow(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Input node with shape `(rows, cols)`.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf data does not match shape");
        self.push(value, rows, cols, Op::Leaf)
    }

    pub fn vector(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, Op::Leaf)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.push(vec![x], 1, 1, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "shape mismatch in elementwise op");
        sa
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.same_shape(a, b);
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(value, r, c, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[a.0];
        let (r, c) = (n.rows, n.cols);
        let value = n.value.iter().map(|&x| f(x)).collect();
        self.push(value, r, c, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddConst(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), logistic)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (m, n) = self.shape(w);
        assert_eq!(self.shape(x), (n, 1), "matvec shape mismatch");
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let value = matvec(wv, xv, m, n);
        self.push(value, m, 1, Op::MatVec(w, x))
    }

    pub fn mattvec(&mut self, w: Var, u: Var) -> Var {
        let (m, n) = self.shape(w);
        assert_eq!(self.shape(u), (m, 1), "mattvec shape mismatch");
        let value = mattvec(&self.nodes[w.0].value, &self.nodes[u.0].value, m, n);
        self.push(value, n, 1, Op::MatTVec(w, u))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (m, ca) = self.shape(a);
        let (n, cb) = self.shape(b);
        assert!(ca == 1 && cb == 1, "outer expects vectors");
        let value = outer(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(value, m, n, Op::Outer(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1), "broadcast expects a scalar");
        let x = self.nodes[a.0].value[0];
        self.push(vec![x; rows * cols], rows, cols, Op::Broadcast(a))
    }

    pub fn index(&mut self, a: Var, k: usize) -> Var {
        let x = self.nodes[a.0].value[k];
        self.push(vec![x], 1, 1, Op::Index(a, k))
    }

    /// Vector of length `n` holding the scalar `a` at position `k`.
    pub fn scatter(&mut self, a: Var, k: usize, n: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1), "scatter expects a scalar");
        let mut value = vec![0.0; n];
        value[k] = self.nodes[a.0].value[0];
        self.push(value, n, 1, Op::Scatter(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch");
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        self.push(value, m, n, Op::MatMul(a, b))
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt shape mismatch");
        let value = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        self.push(value, m, n, Op::MatMulNT(a, b))
    }

    /// `a^T b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (k, m) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul_tn shape mismatch");
        let value = matmul_tn(&self.nodes[a.0].value, &self.nodes[b.0].value, k, m, n);
        self.push(value, m, n, Op::MatMulTN(a, b))
    }

    /// Repeats the column vector `a` into `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column vector");
        let mut value = Vec::with_capacity(m * cols);
        for &x in &self.nodes[a.0].value {
            value.extend(std::iter::repeat_n(x, cols));
        }
        self.push(value, m, cols, Op::BroadcastCols(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = row_sum(&self.nodes[a.0].value, m, n);
        self.push(value, m, 1, Op::RowSum(a))
    }

    pub fn row(&mut self, a: Var, k: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(k < m, "row index out of range");
        let value = self.nodes[a.0].value[k * n..(k + 1) * n].to_vec();
        self.push(value, 1, n, Op::Row(a, k))
    }

    /// `(rows, n)` matrix holding the row `a` at row `k` and zeros elsewhere.
    pub fn scatter_row(&mut self, a: Var, k: usize, rows: usize) -> Var {
        let (r, n) = self.shape(a);
        assert!(r == 1 && k < rows, "scatter_row expects a row inside the output");
        let mut value = vec![0.0; rows * n];
        value[k * n..(k + 1) * n].copy_from_slice(&self.nodes[a.0].value);
        self.push(value, rows, n, Op::ScatterRow(a, k))
    }

    /// Marks every node that depends on one of `wrt`.
    fn requires(&self, out: Var, wrt: &[Var]) -> Vec<bool> {
        let mut req = vec![false; out.0 + 1];
        for w in wrt {
            if w.0 <= out.0 {
                req[w.0] = true;
            }
        }
        let lo = wrt.iter().map(|w| w.0).min().unwrap_or(out.0 + 1);
        for i in lo..=out.0 {
            if req[i] {
                continue;
            }
            req[i] = self.nodes[i]
                .op
                .parents()
                .iter()
                .flatten()
                .any(|p| req[p.0]);
        }
        req
    }

    /// Checks that every node from `from` on holds finite values.
    pub fn check_finite(&self, from: usize) -> Result<(), AutodiffError> {
        for (i, n) in self.nodes.iter().enumerate().skip(from) {
            if n.value.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteValue {
                    node: i,
                    op: n.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Numeric gradient of the scalar `out` with respect to each of `wrt`.
    pub fn backward(&self, out: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>, AutodiffError> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.0));
        }
        let req = self.requires(out, wrt);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    node: i,
                    op: node.op.name(),
                });
            }
            let y = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, &req, a, || g.clone());
                    acc(&mut grads, &req, b, || g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &req, a, || g.clone());
                    acc(&mut grads, &req, b, || g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    acc(&mut grads, &req, a, || zip(&g, bv, |g, b| g * b));
                    acc(&mut grads, &req, b, || zip(&g, av, |g, a| g * a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    acc(&mut grads, &req, a, || zip(&g, bv, |g, b| g / b));
                    acc(&mut grads, &req, b, || {
                        g.iter().zip(y).zip(bv).map(|((g, y), b)| -g * y / b).collect()
                    });
                }
                Op::Neg(a) => acc(&mut grads, &req, a, || g.iter().map(|x| -x).collect()),
                Op::Scale(a, c) => acc(&mut grads, &req, a, || g.iter().map(|x| c * x).collect()),
                Op::AddConst(a) => acc(&mut grads, &req, a, || g.clone()),
                Op::MatVec(w, x) => {
                    let (m, n) = self.shape(w);
                    acc(&mut grads, &req, w, || outer(&g, self.value(x)));
                    acc(&mut grads, &req, x, || mattvec(self.value(w), &g, m, n));
                }
                Op::MatTVec(w, u) => {
                    let (m, n) = self.shape(w);
                    acc(&mut grads, &req, w, || outer(self.value(u), &g));
                    acc(&mut grads, &req, u, || matvec(self.value(w), &g, m, n));
                }
                Op::Outer(a, b) => {
                    let (m, n) = (node.rows, node.cols);
                    acc(&mut grads, &req, a, || matvec(&g, self.value(b), m, n));
                    acc(&mut grads, &req, b, || mattvec(&g, self.value(a), m, n));
                }
                Op::Sigmoid(a) => acc(&mut grads, &req, a, || zip(&g, y, |g, y| g * y * (1.0 - y))),
                Op::Tanh(a) => acc(&mut grads, &req, a, || zip(&g, y, |g, y| g * (1.0 - y * y))),
                Op::Exp(a) => acc(&mut grads, &req, a, || zip(&g, y, |g, y| g * y)),
                Op::Ln(a) => acc(&mut grads, &req, a, || zip(&g, self.value(a), |g, x| g / x)),
                Op::Sqrt(a) => acc(&mut grads, &req, a, || zip(&g, y, |g, y| 0.5 * g / y)),
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    acc(&mut grads, &req, a, || vec![g[0]; len]);
                }
                Op::Broadcast(a, ..) => acc(&mut grads, &req, a, || vec![g.iter().sum()]),
                Op::Index(a, k) => {
                    let len = self.nodes[a.0].value.len();
                    acc(&mut grads, &req, a, || {
                        let mut v = vec![0.0; len];
                        v[k] = g[0];
                        v
                    });
                }
                Op::Scatter(a, k) => acc(&mut grads, &req, a, || vec![g[k]]),
                Op::MatMul(a, b) => {
                    let ((m, k), n) = (self.shape(a), node.cols);
                    acc(&mut grads, &req, a, || matmul_nt(&g, self.value(b), m, n, k));
                    acc(&mut grads, &req, b, || matmul_tn(self.value(a), &g, m, k, n));
                }
                Op::MatMulNT(a, b) => {
                    let ((m, k), n) = (self.shape(a), node.cols);
                    acc(&mut grads, &req, a, || matmul(&g, self.value(b), m, n, k));
                    acc(&mut grads, &req, b, || matmul_tn(&g, self.value(a), m, n, k));
                }
                Op::MatMulTN(a, b) => {
                    let ((k, m), n) = (self.shape(a), node.cols);
                    acc(&mut grads, &req, a, || matmul_nt(self.value(b), &g, k, n, m));
                    acc(&mut grads, &req, b, || matmul(self.value(a), &g, k, m, n));
                }
                Op::BroadcastCols(a) => {
                    acc(&mut grads, &req, a, || row_sum(&g, node.rows, node.cols));
                }
                Op::RowSum(a) => {
                    let n = self.shape(a).1;
                    acc(&mut grads, &req, a, || {
                        g.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect()
                    });
                }
                Op::Row(a, k) => {
                    let (m, n) = self.shape(a);
                    acc(&mut grads, &req, a, || {
                        let mut v = vec![0.0; m * n];
                        v[k * n..(k + 1) * n].copy_from_slice(&g);
                        v
                    });
                }
                Op::ScatterRow(a, k) => {
                    let n = node.cols;
                    acc(&mut grads, &req, a, || g[k * n..(k + 1) * n].to_vec());
                }
            }
            grads[i] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[w.0].value.len()])
            })
            .collect())
    }

    /// Gradient of the scalar `out` with respect to each of `wrt`, recorded as
    /// differentiable nodes on this tape.
    pub fn backward_graph(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.0));
        }
        let req = self.requires(out, wrt);
        let mut grads: Vec<Option<Var>> = vec![None; out.0 + 1];
        grads[out.0] = Some(self.constant(1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i] else { continue };
            if self.nodes[g.0].value.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            let y = Var(i);
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |_| g);
                    self.acc_graph(&mut grads, &req, b, |_| g);
                }
                Op::Sub(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |_| g);
                    self.acc_graph(&mut grads, &req, b, |t| t.neg(g));
                }
                Op::Mul(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.mul(g, b));
                    self.acc_graph(&mut grads, &req, b, |t| t.mul(g, a));
                }
                Op::Div(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.div(g, b));
                    self.acc_graph(&mut grads, &req, b, |t| {
                        let gy = t.mul(g, y);
                        let q = t.div(gy, b);
                        t.neg(q)
                    });
                }
                Op::Neg(a) => self.acc_graph(&mut grads, &req, a, |t| t.neg(g)),
                Op::Scale(a, c) => self.acc_graph(&mut grads, &req, a, |t| t.scale(g, c)),
                Op::AddConst(a) => self.acc_graph(&mut grads, &req, a, |_| g),
                Op::MatVec(w, x) => {
                    self.acc_graph(&mut grads, &req, w, |t| t.outer(g, x));
                    self.acc_graph(&mut grads, &req, x, |t| t.mattvec(w, g));
                }
                Op::MatTVec(w, u) => {
                    self.acc_graph(&mut grads, &req, w, |t| t.outer(u, g));
                    self.acc_graph(&mut grads, &req, u, |t| t.matvec(w, g));
                }
                Op::Outer(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.matvec(g, b));
                    self.acc_graph(&mut grads, &req, b, |t| t.mattvec(g, a));
                }
                Op::Sigmoid(a) => self.acc_graph(&mut grads, &req, a, |t| {
                    let ny = t.neg(y);
                    let one_minus = t.add_const(ny, 1.0);
                    let d = t.mul(y, one_minus);
                    t.mul(g, d)
                }),
                Op::Tanh(a) => self.acc_graph(&mut grads, &req, a, |t| {
                    let y2 = t.mul(y, y);
                    let ny2 = t.neg(y2);
                    let d = t.add_const(ny2, 1.0);
                    t.mul(g, d)
                }),
                Op::Exp(a) => self.acc_graph(&mut grads, &req, a, |t| t.mul(g, y)),
                Op::Ln(a) => self.acc_graph(&mut grads, &req, a, |t| t.div(g, a)),
                Op::Sqrt(a) => self.acc_graph(&mut grads, &req, a, |t| {
                    let q = t.div(g, y);
                    t.scale(q, 0.5)
                }),
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    self.acc_graph(&mut grads, &req, a, |t| t.broadcast(g, r, c));
                }
                Op::Broadcast(a, ..) => self.acc_graph(&mut grads, &req, a, |t| t.sum(g)),
                Op::Index(a, k) => {
                    let n = self.nodes[a.0].value.len();
                    self.acc_graph(&mut grads, &req, a, |t| t.scatter(g, k, n));
                }
                Op::Scatter(a, k) => self.acc_graph(&mut grads, &req, a, |t| t.index(g, k)),
                Op::MatMul(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.matmul_nt(g, b));
                    self.acc_graph(&mut grads, &req, b, |t| t.matmul_tn(a, g));
                }
                Op::MatMulNT(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.matmul(g, b));
                    self.acc_graph(&mut grads, &req, b, |t| t.matmul_tn(g, a));
                }
                Op::MatMulTN(a, b) => {
                    self.acc_graph(&mut grads, &req, a, |t| t.matmul_nt(b, g));
                    self.acc_graph(&mut grads, &req, b, |t| t.matmul(a, g));
                }
                Op::BroadcastCols(a) => self.acc_graph(&mut grads, &req, a, |t| t.row_sum(g)),
                Op::RowSum(a) => {
                    let n = self.shape(a).1;
                    self.acc_graph(&mut grads, &req, a, |t| t.broadcast_cols(g, n));
                }
                Op::Row(a, k) => {
                    let m = self.shape(a).0;
                    self.acc_graph(&mut grads, &req, a, |t| t.scatter_row(g, k, m));
                }
                Op::ScatterRow(a, k) => self.acc_graph(&mut grads, &req, a, |t| t.row(g, k)),
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.leaf(vec![0.0; r * c], r, c)
                }
            })
            .collect())
    }

    fn acc_graph(
        &mut self,
        grads: &mut [Option<Var>],
        req: &[bool],
        target: Var,
        contribution: impl FnOnce(&mut Tape) -> Var,
    ) {
        if !req[target.0] {
            return;
        }
        let c = contribution(self);
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, c),
            None => c,
        });
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], req: &[bool], target: Var, contribution: impl FnOnce() -> Vec<f64>) {
    if !req[target.0] {
        return;
    }
    let c = contribution();
    match &mut grads[target.0] {
        Some(prev) => prev.iter_mut().zip(c).for_each(|(p, x)| *p += x),
        slot @ None => *slot = Some(c),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Row-major `(m, n)` matrix times a length-`n` vector.
pub(crate) fn matvec(w: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m)
        .map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Transpose of a row-major `(m, n)` matrix times a length-`m` vector.
pub(crate) fn mattvec(w: &[f64], u: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..m {
        let ui = u[i];
        for (o, wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += wij * ui;
        }
    }
    out
}

/// `(m, k)` times `(k, n)`, row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `(m, k)` times the transpose of `(n, k)`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(ai.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum());
        }
    }
    out
}

/// Transpose of `(k, m)` times `(k, n)`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for (i, &api) in a[p * m..(p + 1) * m].iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            for (o, &bpj) in out[i * n..(i + 1) * n].iter_mut().zip(bp) {
                *o += api * bpj;
            }
        }
    }
    out
}

fn row_sum(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    (0..m).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect()
}

pub(crate) fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    out
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of `f` at `theta`, where `f` receives `theta` as one vector leaf.
pub fn grad<F>(f: F, theta: &[f64]) -> Result<Vec<f64>, AutodiffError>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.vector(theta.to_vec());
    let out = f(&mut tape, x);
    Ok(tape.backward(out, &[x])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let g = grad(|t, x| t.mul(x, x), &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let g = grad(|t, x| t.sigmoid(x), &[0.0]).unwrap();
        assert_eq!(g, vec![0.25]);
    }

    /// Central differences of `f` at `x`.
    fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[j] += h;
                m[j] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    /// Scalar function exercising every op, with `x` of length 6.
    fn build(t: &mut Tape, x: Var) -> Var {
        let w = t.leaf(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4], 2, 3);
        let xa = t.index(x, 0);
        let xb = t.index(x, 1);
        let xc = t.index(x, 2);
        let s0 = t.scatter(xa, 0, 3);
        let s1 = t.scatter(xb, 1, 3);
        let s2 = t.scatter(xc, 2, 3);
        let v01 = t.add(s0, s1);
        let v = t.add(v01, s2);
        let wv = t.matvec(w, v);
        let sg = t.sigmoid(wv);
        let th = t.tanh(sg);
        let u = t.mattvec(w, th);
        let o = t.outer(th, u);
        let so = t.sum(o);
        let xd = t.index(x, 3);
        let xe = t.index(x, 4);
        let xf = t.index(x, 5);
        let e = t.exp(xd);
        let sq = t.mul(xe, xe);
        let sq1 = t.add_const(sq, 1.0);
        let l = t.ln(sq1);
        let r = t.sqrt(sq1);
        let dv = t.div(l, r);
        let ng = t.neg(xf);
        let sc = t.scale(ng, 2.5);
        let p = t.mul(e, sc);
        let a = t.add(so, dv);
        let b = t.sub(a, p);
        let bb = t.broadcast(b, 2, 1);
        let bb2 = t.mul(bb, bb);
        t.sum(bb2)
    }

    fn eval(x: &[f64]) -> f64 {
        let mut t = Tape::new();
        let v = t.vector(x.to_vec());
        let out = build(&mut t, v);
        t.scalar(out)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x = [0.4, -1.1, 0.8, 0.2, -0.6, 1.3];
        let g = grad(build, &x).unwrap();
        let reference = fd(&eval, &x, 1e-5);
        for (a, b) in g.iter().zip(&reference) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1.0) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn graph_backward_agrees_with_numeric() {
        let x = [0.4, -1.1, 0.8, 0.2, -0.6, 1.3];
        let mut t = Tape::new();
        let v = t.vector(x.to_vec());
        let out = build(&mut t, v);
        let numeric = t.backward(out, &[v]).unwrap().remove(0);
        let g = t.backward_graph(out, &[v]).unwrap()[0];
        for (a, b) in t.value(g).iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_matches_finite_differences_of_gradient() {
        // Hessian-vector product through the recorded backward pass.
        let x = [0.4, -1.1, 0.8, 0.2, -0.6, 1.3];
        let dir = [0.3, 0.1, -0.5, 0.9, 0.2, -0.7];
        let hvp = {
            let mut t = Tape::new();
            let v = t.vector(x.to_vec());
            let out = build(&mut t, v);
            let g = t.backward_graph(out, &[v]).unwrap()[0];
            let d = t.vector(dir.to_vec());
            let gd = t.mul(g, d);
            let s = t.sum(gd);
            t.backward(s, &[v]).unwrap().remove(0)
        };
        let grad_at = |y: &[f64]| grad(build, y).unwrap();
        let h = 1e-5;
        let plus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
        let (gp, gm) = (grad_at(&plus), grad_at(&minus));
        for j in 0..x.len() {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            assert!((hvp[j] - fd).abs() / hvp[j].abs().max(1.0) < 1e-6, "{} vs {}", hvp[j], fd);
        }
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![3.0]);
        let s = t.sum(a);
        let g = t.backward(s, &[a, b]).unwrap();
        assert_eq!(g[1], vec![0.0]);
        let gg = t.backward_graph(s, &[b]).unwrap();
        assert_eq!(t.value(gg[0]), &[0.0]);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut t = Tape::new();
        let a = t.vector(vec![0.0]);
        let l = t.ln(a);
        let s = t.sum(l);
        let err = t.backward(s, &[a]).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { op: "leaf", .. }));
        assert!(t.check_finite(0).is_err());
    }

    #[test]
    fn backward_visits_each_node_once() {
        // Diamond: y = x*x + x*x; a double visit would double the gradient.
        let g = grad(
            |t, x| {
                let a = t.mul(x, x);
                let b = t.add(a, a);
                t.sum(b)
            },
            &[2.0],
        )
        .unwrap();
        assert_eq!(g, vec![8.0]);
    }

    /// Scalar function of a `(3, 4)` input exercising the matrix ops.
    fn build_matrix(t: &mut Tape, x: Var) -> Var {
        let w = t.leaf(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4], 2, 3);
        let b = t.vector(vec![0.05, -0.1]);
        let wx = t.matmul(w, x);
        let bb = t.broadcast_cols(b, 4);
        let z = t.add(wx, bb);
        let h = t.tanh(z);
        let back = t.matmul_tn(w, h);
        let prod = t.mul(back, x);
        let gram = t.matmul_nt(h, x);
        let r1 = t.row(prod, 1);
        let s1 = t.scatter_row(r1, 2, 3);
        let rs = t.row_sum(s1);
        let q = t.mul(gram, gram);
        let a = t.sum(q);
        let c = t.sum(rs);
        let cc = t.mul(c, c);
        let hh = t.mul(h, h);
        let d = t.sum(hh);
        let ac = t.add(a, cc);
        t.add(ac, d)
    }

    fn matrix_grad(x: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let v = t.leaf(x.to_vec(), 3, 4);
        let out = build_matrix(&mut t, v);
        (t.scalar(out), t.backward(out, &[v]).unwrap().remove(0))
    }

    fn matrix_point() -> Vec<f64> {
        (0..12).map(|i| ((i as f64) * 0.77).sin()).collect()
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let x = matrix_point();
        let (_, g) = matrix_grad(&x);
        let reference = fd(&|y| matrix_grad(y).0, &x, 1e-5);
        for (a, b) in g.iter().zip(&reference) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1.0) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn matrix_ops_second_order() {
        let x = matrix_point();
        let dir: Vec<f64> = (0..12).map(|i| ((i as f64) * 1.3).cos()).collect();
        let (numeric, hvp) = {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), 3, 4);
            let out = build_matrix(&mut t, v);
            let numeric = t.backward(out, &[v]).unwrap().remove(0);
            let g = t.backward_graph(out, &[v]).unwrap()[0];
            assert_eq!(t.shape(g), (3, 4));
            for (a, b) in t.value(g).iter().zip(&numeric) {
                assert!((a - b).abs() < 1e-12);
            }
            let d = t.leaf(dir.clone(), 3, 4);
            let gd = t.mul(g, d);
            let s = t.sum(gd);
            (numeric, t.backward(s, &[v]).unwrap().remove(0))
        };
        assert_eq!(numeric.len(), 12);
        let h = 1e-5;
        let plus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
        let (gp, gm) = (matrix_grad(&plus).1, matrix_grad(&minus).1);
        for j in 0..x.len() {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            assert!((hvp[j] - fd).abs() / hvp[j].abs().max(1.0) < 1e-6, "{} vs {}", hvp[j], fd);
        }
    }
}
