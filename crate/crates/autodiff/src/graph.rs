//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node; [`Var`] is a cheap handle to
//! a node. Calling [`Graph::backward`] walks the tape once in reverse.

use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};
use std::cell::RefCell;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    Shape {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AdError>;

enum Val {
    Own(Vec<f64>),
    Param(Arc<Tensor>),
}

impl Val {
    fn get(&self) -> &[f64] {
        match self {
            Val::Own(v) => v,
            Val::Param(t) => &t.data,
        }
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1 x cols`, repeated down the rows.
    Row,
    /// `rows x 1`, repeated across the columns.
    Col,
    Scalar,
}

impl Bcast {
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
            Bcast::Scalar => 0,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Const,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Log1p(usize),
    Pow(usize, f64),
    Softplus(usize),
    Sigmoid(usize),
    Silu(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize, f64),
    Rope {
        x: usize,
        heads: usize,
        pos: Vec<f64>,
        base: f64,
    },
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    SumCols(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    Scatter(usize, Vec<usize>),
    StopGrad,
    Custom(Vec<usize>, Vec<Vec<f64>>),
    Bregman(usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    val: Val,
    op: Op,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    g: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

/// `C = alpha * op(A) op(B) + beta * C`, where `op` optionally transposes.
/// `A` is `m x k` after `op`, `B` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices hold exactly m*k, k*n and m*n elements for the given
    // strides, which matrixmultiply only reads/writes inside.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn rope_angle(pos: f64, k: usize, half: usize, base: f64) -> (f64, f64) {
    let freq = base.powf(-(k as f64) / half as f64);
    (pos * freq).sin_cos()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, val: Val, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { rows, cols, val, op });
        Var {
            id: nodes.len() - 1,
            g: self,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t.rows, t.cols, Val::Own(t.data), Op::Leaf)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.rows, t.cols, Val::Own(t.data), Op::Const)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    /// Parameter from a store; its gradient is routed back by
    /// [`Gradients::accumulate`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let t = store.shared(id);
        let (r, c) = (t.rows, t.cols);
        self.push(r, c, Val::Param(t), Op::Param(id))
    }

    /// Scalar whose value and gradients with respect to `inputs` were computed
    /// elsewhere. `grads[j]` must match the size of `inputs[j]`.
    pub fn custom_scalar<'g>(&'g self, inputs: &[Var<'g>], value: f64, grads: Vec<Vec<f64>>) -> Result<Var<'g>> {
        if inputs.len() != grads.len() {
            return Err(AdError::Invalid {
                op: "custom_scalar",
                msg: format!("{} inputs but {} gradients", inputs.len(), grads.len()),
            });
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if v.len() != g.len() {
                return Err(AdError::Shape {
                    op: "custom_scalar",
                    a: v.shape(),
                    b: (1, g.len()),
                });
            }
        }
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(1, 1, Val::Own(vec![value]), Op::Custom(ids, grads)))
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        let n = &self.nodes.borrow()[id];
        (n.rows, n.cols)
    }

    /// Run reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let (r, c) = (nodes[root.id].rows, nodes[root.id].cols);
        if r * c != 1 {
            return Err(AdError::Invalid {
                op: "backward",
                msg: format!("root must be a scalar, got {r}x{c}"),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let keep = matches!(node.op, Op::Leaf | Op::Param(_));
            let g = match if keep { grads[id].clone() } else { grads[id].take() } {
                Some(g) => g,
                None => continue,
            };
            backprop(&nodes, id, &g, &mut grads);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn reduce_into(dst: &mut [f64], src: impl Iterator<Item = f64>, bc: Bcast, cols: usize) {
    for (i, v) in src.enumerate() {
        dst[bc.index(i, cols)] += v;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let (rows, cols) = (node.rows, node.cols);
    let y = node.val.get();
    let val = |i: usize| nodes[i].val.get();
    let len = |i: usize| nodes[i].rows * nodes[i].cols;
    match &node.op {
        Op::Leaf | Op::Param(_) | Op::Const | Op::StopGrad => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (d, x) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                *d += x;
            }
            let gb = acc(grads, *b, len(*b));
            reduce_into(gb, g.iter().map(|x| sign * x), *bc, cols);
        }
        Op::Mul(a, b, bc) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = acc(grads, *a, len(*a));
            for (i, d) in ga.iter_mut().enumerate() {
                *d += g[i] * vb[bc.index(i, cols)];
            }
            let gb = acc(grads, *b, len(*b));
            reduce_into(gb, g.iter().zip(va).map(|(x, a)| x * a), *bc, cols);
        }
        Op::Div(a, b, bc) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = acc(grads, *a, len(*a));
            for (i, d) in ga.iter_mut().enumerate() {
                *d += g[i] / vb[bc.index(i, cols)];
            }
            let gb = acc(grads, *b, len(*b));
            for i in 0..g.len() {
                let bi = vb[bc.index(i, cols)];
                gb[bc.index(i, cols)] -= g[i] * va[i] / (bi * bi);
            }
        }
        Op::Scale(a, k) => {
            for (d, x) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                *d += k * x;
            }
        }
        Op::Offset(a) => {
            for (d, x) in acc(grads, *a, len(*a)).iter_mut().zip(g) {
                *d += x;
            }
        }
        Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, cols);
            let (va, vb) = (val(*a), val(*b));
            gemm(m, n, k, g, false, vb, true, acc(grads, *a, m * k), 1.0);
            gemm(k, m, n, va, true, g, false, acc(grads, *b, k * n), 1.0);
        }
        Op::MatMulT(a, b) => {
            // C = A B^T with A m x k, B n x k
            let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, cols);
            let (va, vb) = (val(*a), val(*b));
            gemm(m, n, k, g, false, vb, false, acc(grads, *a, m * k), 1.0);
            gemm(n, m, k, g, true, va, false, acc(grads, *b, n * k), 1.0);
        }
        Op::Transpose(a) => {
            let ga = acc(grads, *a, len(*a));
            for i in 0..rows {
                for j in 0..cols {
                    ga[j * rows + i] += g[i * cols + j];
                }
            }
        }
        Op::Exp(a) => {
            for ((d, x), yy) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(y) {
                *d += x * yy;
            }
        }
        Op::Log(a) | Op::Log1p(a) => {
            let off = if matches!(node.op, Op::Log1p(_)) { 1.0 } else { 0.0 };
            let va = val(*a);
            for ((d, x), xa) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(va) {
                *d += x / (xa + off);
            }
        }
        Op::Pow(a, p) => {
            let va = val(*a);
            for ((d, x), xa) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(va) {
                *d += x * p * xa.powf(p - 1.0);
            }
        }
        Op::Softplus(a) => {
            let va = val(*a);
            for ((d, x), xa) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(va) {
                *d += x * sigmoid(*xa);
            }
        }
        Op::Sigmoid(a) => {
            for ((d, x), s) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(y) {
                *d += x * s * (1.0 - s);
            }
        }
        Op::Silu(a) => {
            let va = val(*a);
            for ((d, x), xa) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(va) {
                let s = sigmoid(*xa);
                *d += x * (s + xa * s * (1.0 - s));
            }
        }
        Op::Gelu(a) => {
            let va = val(*a);
            for ((d, x), xa) in acc(grads, *a, len(*a)).iter_mut().zip(g).zip(va) {
                *d += x * gelu_grad(*xa);
            }
        }
        Op::Softmax(a) => {
            let ga = acc(grads, *a, rows * cols);
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                for i in s {
                    ga[i] += y[i] * (g[i] - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let ga = acc(grads, *a, rows * cols);
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let tot: f64 = g[s.clone()].iter().sum();
                for i in s {
                    ga[i] += g[i] - y[i].exp() * tot;
                }
            }
        }
        Op::LayerNorm(a, eps) => {
            let va = val(*a);
            let ga = acc(grads, *a, rows * cols);
            let n = cols as f64;
            for r in 0..rows {
                let s = r * cols..(r + 1) * cols;
                let mean = va[s.clone()].iter().sum::<f64>() / n;
                let var = va[s.clone()].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = g[s.clone()].iter().sum::<f64>() / n;
                let gy = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum::<f64>() / n;
                for i in s {
                    ga[i] += inv * (g[i] - gm - y[i] * gy);
                }
            }
        }
        Op::Rope { x, heads, pos, base } => {
            let dh = cols / heads;
            let half = dh / 2;
            let ga = acc(grads, *x, rows * cols);
            for r in 0..rows {
                for h in 0..*heads {
                    for k in 0..half {
                        let (sn, cs) = rope_angle(pos[r], k, half, *base);
                        let i0 = r * cols + h * dh + 2 * k;
                        let (g0, g1) = (g[i0], g[i0 + 1]);
                        ga[i0] += g0 * cs + g1 * sn;
                        ga[i0 + 1] += -g0 * sn + g1 * cs;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            for d in acc(grads, *a, len(*a)).iter_mut() {
                *d += g[0];
            }
        }
        Op::MeanAll(a) => {
            let n = len(*a) as f64;
            for d in acc(grads, *a, len(*a)).iter_mut() {
                *d += g[0] / n;
            }
        }
        Op::SumRows(a) => {
            let c = nodes[*a].cols;
            for (i, d) in acc(grads, *a, len(*a)).iter_mut().enumerate() {
                *d += g[i / c];
            }
        }
        Op::SumCols(a) => {
            let c = nodes[*a].cols;
            for (i, d) in acc(grads, *a, len(*a)).iter_mut().enumerate() {
                *d += g[i % c];
            }
        }
        Op::SliceCols(a, start) => {
            let ac = nodes[*a].cols;
            let ga = acc(grads, *a, len(*a));
            for r in 0..rows {
                for j in 0..cols {
                    ga[r * ac + start + j] += g[r * cols + j];
                }
            }
        }
        Op::SliceRows(a, start) => {
            let ga = acc(grads, *a, len(*a));
            for (d, x) in ga[start * cols..(start + rows) * cols].iter_mut().zip(g) {
                *d += x;
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                let gp = acc(grads, p, rows * pc);
                for r in 0..rows {
                    for j in 0..pc {
                        gp[r * pc + j] += g[r * cols + off + j];
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = len(p);
                for (d, x) in acc(grads, p, n).iter_mut().zip(&g[off..off + n]) {
                    *d += x;
                }
                off += n;
            }
        }
        Op::GatherRows(a, idx) => {
            let ga = acc(grads, *a, len(*a));
            for (k, &src) in idx.iter().enumerate() {
                for j in 0..cols {
                    ga[src * cols + j] += g[k * cols + j];
                }
            }
        }
        Op::Gather(a, idx) => {
            let ga = acc(grads, *a, len(*a));
            for (k, &src) in idx.iter().enumerate() {
                ga[src] += g[k];
            }
        }
        Op::Scatter(a, idx) => {
            let ga = acc(grads, *a, len(*a));
            for (k, &dst) in idx.iter().enumerate() {
                ga[k] += g[dst];
            }
        }
        Op::Custom(inputs, local) => {
            for (&i, lg) in inputs.iter().zip(local) {
                for (d, x) in acc(grads, i, lg.len()).iter_mut().zip(lg) {
                    *d += g[0] * x;
                }
            }
        }
        Op::Bregman(t, m) => {
            let (vt, vm) = (val(*t), val(*m));
            {
                let gt = acc(grads, *t, len(*t));
                for i in 0..g.len() {
                    if vt[i] > 0.0 {
                        gt[i] += g[i] * (vt[i] / vm[i]).ln();
                    }
                }
            }
            let gm = acc(grads, *m, len(*m));
            for i in 0..g.len() {
                gm[i] += g[i] * (1.0 - vt[i] / vm[i]);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf or parameter node.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Add `scale` times every parameter gradient into `store`.
    pub fn accumulate(&self, store: &mut GradStore, scale: f64) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (d, x) in store.grads[pid.0].iter_mut().zip(g) {
                    *d += scale * x;
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn shape(&self) -> (usize, usize) {
        self.g.shape_of(self.id)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.g.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.rows, n.cols, n.val.get().to_vec())
    }

    /// Value of a `1 x 1` node (first element otherwise).
    pub fn item(&self) -> f64 {
        self.g.nodes.borrow()[self.id].val.get()[0]
    }

    fn with<R>(&self, f: impl FnOnce(&[f64], usize, usize) -> R) -> R {
        let nodes = self.g.nodes.borrow();
        let n = &nodes[self.id];
        f(n.val.get(), n.rows, n.cols)
    }

    fn same_graph(&self, o: &Var<'g>) {
        assert!(std::ptr::eq(self.g, o.g), "vars from different graphs");
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let (out, r, c) = self.with(|v, r, c| (v.iter().map(|&x| f(x)).collect(), r, c));
        self.g.push(r, c, Val::Own(out), op)
    }

    fn bcast(&self, o: &Var<'g>, op: &'static str) -> Result<Bcast> {
        self.same_graph(o);
        let (a, b) = (self.shape(), o.shape());
        if a == b {
            Ok(Bcast::Same)
        } else if b == (1, 1) {
            Ok(Bcast::Scalar)
        } else if b == (1, a.1) {
            Ok(Bcast::Row)
        } else if b == (a.0, 1) {
            Ok(Bcast::Col)
        } else {
            Err(AdError::Shape { op, a, b })
        }
    }

    fn binary(
        self,
        o: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'g>> {
        let bc = self.bcast(&o, name)?;
        let (r, c) = self.shape();
        let out = {
            let nodes = self.g.nodes.borrow();
            let (va, vb) = (nodes[self.id].val.get(), nodes[o.id].val.get());
            va.iter().enumerate().map(|(i, &x)| f(x, vb[bc.index(i, c)])).collect()
        };
        Ok(self.g.push(r, c, Val::Own(out), mk(self.id, o.id, bc)))
    }

    /// Elementwise sum; `o` may be the same shape, a row, a column or a scalar.
    pub fn add(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(o, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(o, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(o, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, o: Var<'g>) -> Result<Var<'g>> {
        self.binary(o, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, k), |x| k * x)
    }

    pub fn offset(self, k: f64) -> Var<'g> {
        self.unary(Op::Offset(self.id), |x| x + k)
    }

    pub fn matmul(self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o);
        let ((m, k), (k2, n)) = (self.shape(), o.shape());
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul",
                a: (m, k),
                b: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.g.nodes.borrow();
            gemm(
                m,
                k,
                n,
                nodes[self.id].val.get(),
                false,
                nodes[o.id].val.get(),
                false,
                &mut out,
                0.0,
            );
        }
        Ok(self.g.push(m, n, Val::Own(out), Op::MatMul(self.id, o.id)))
    }

    /// `self * o^T`.
    pub fn matmul_t(self, o: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&o);
        let ((m, k), (n, k2)) = (self.shape(), o.shape());
        if k != k2 {
            return Err(AdError::Shape {
                op: "matmul_t",
                a: (m, k),
                b: (n, k2),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.g.nodes.borrow();
            gemm(
                m,
                k,
                n,
                nodes[self.id].val.get(),
                false,
                nodes[o.id].val.get(),
                true,
                &mut out,
                0.0,
            );
        }
        Ok(self.g.push(m, n, Val::Own(out), Op::MatMulT(self.id, o.id)))
    }

    pub fn transpose(self) -> Var<'g> {
        let (out, r, c) = self.with(|v, r, c| {
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = v[i * c + j];
                }
            }
            (o, r, c)
        });
        self.g.push(c, r, Val::Own(out), Op::Transpose(self.id))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn log1p(self) -> Var<'g> {
        self.unary(Op::Log1p(self.id), f64::ln_1p)
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(Op::Pow(self.id, p), |x| x.powf(p))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    fn rowwise(self, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Var<'g> {
        let (out, r, c) = self.with(|v, r, c| {
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                f(&v[i * c..(i + 1) * c], &mut o[i * c..(i + 1) * c]);
            }
            (o, r, c)
        });
        self.g.push(r, c, Val::Own(out), op)
    }

    pub fn softmax_rows(self) -> Var<'g> {
        self.rowwise(Op::Softmax(self.id), |x, o| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = (xi - m).exp();
                s += *oi;
            }
            o.iter_mut().for_each(|v| *v /= s);
        })
    }

    pub fn log_softmax_rows(self) -> Var<'g> {
        self.rowwise(Op::LogSoftmax(self.id), |x, o| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = xi - lse;
            }
        })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g> {
        self.rowwise(Op::LayerNorm(self.id, eps), |x, o| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = (xi - mean) * inv;
            }
        })
    }

    /// Rotary position embedding applied independently to each of `heads`
    /// column blocks; row `r` is rotated by position `pos[r]`.
    pub fn rope(self, heads: usize, pos: &[f64], base: f64) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if heads == 0 || c % heads != 0 || !(c / heads).is_multiple_of(2) || pos.len() != r {
            return Err(AdError::Invalid {
                op: "rope",
                msg: format!("{r}x{c} input, {heads} heads, {} positions", pos.len()),
            });
        }
        let dh = c / heads;
        let half = dh / 2;
        let out = self.with(|v, _, _| {
            let mut o = v.to_vec();
            for row in 0..r {
                for h in 0..heads {
                    for k in 0..half {
                        let (sn, cs) = rope_angle(pos[row], k, half, base);
                        let i0 = row * c + h * dh + 2 * k;
                        let (x0, x1) = (v[i0], v[i0 + 1]);
                        o[i0] = x0 * cs - x1 * sn;
                        o[i0 + 1] = x0 * sn + x1 * cs;
                    }
                }
            }
            o
        });
        Ok(self.g.push(
            r,
            c,
            Val::Own(out),
            Op::Rope {
                x: self.id,
                heads,
                pos: pos.to_vec(),
                base,
            },
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.with(|v, _, _| v.iter().sum());
        self.g.push(1, 1, Val::Own(vec![s]), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let s = self.with(|v, _, _| v.iter().sum::<f64>() / v.len() as f64);
        self.g.push(1, 1, Val::Own(vec![s]), Op::MeanAll(self.id))
    }

    /// Sum across columns: `rows x 1`.
    pub fn sum_rows(self) -> Var<'g> {
        let (out, r) = self.with(|v, r, c| ((0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect(), r));
        self.g.push(r, 1, Val::Own(out), Op::SumRows(self.id))
    }

    /// Sum down rows: `1 x cols`.
    pub fn sum_cols(self) -> Var<'g> {
        let (out, c) = self.with(|v, r, c| {
            let mut o = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    o[j] += v[i * c + j];
                }
            }
            (o, c)
        });
        self.g.push(1, c, Val::Own(out), Op::SumCols(self.id))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if start + width > c {
            return Err(AdError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} of {r}x{c}", start + width),
            });
        }
        let out = self.with(|v, _, _| {
            let mut o = Vec::with_capacity(r * width);
            for i in 0..r {
                o.extend_from_slice(&v[i * c + start..i * c + start + width]);
            }
            o
        });
        Ok(self.g.push(r, width, Val::Own(out), Op::SliceCols(self.id, start)))
    }

    pub fn slice_rows(self, start: usize, count: usize) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if start + count > r {
            return Err(AdError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} of {r}x{c}", start + count),
            });
        }
        let out = self.with(|v, _, _| v[start * c..(start + count) * c].to_vec());
        Ok(self.g.push(count, c, Val::Own(out), Op::SliceRows(self.id, start)))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AdError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} of {r}x{c}"),
            });
        }
        let out = self.with(|v, _, _| {
            let mut o = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                o.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            o
        });
        Ok(self
            .g
            .push(idx.len(), c, Val::Own(out), Op::GatherRows(self.id, idx.to_vec())))
    }

    /// Pick elements by flat row-major index into a `1 x k` row.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'g>> {
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AdError::Invalid {
                op: "gather",
                msg: format!("index {bad} of {n} elements"),
            });
        }
        let out = self.with(|v, _, _| idx.iter().map(|&i| v[i]).collect());
        Ok(self
            .g
            .push(1, idx.len(), Val::Own(out), Op::Gather(self.id, idx.to_vec())))
    }

    /// Place the elements of `self` at flat indices of a zero `rows x cols`
    /// matrix, summing collisions.
    pub fn scatter(self, idx: &[usize], rows: usize, cols: usize) -> Result<Var<'g>> {
        if idx.len() != self.len() || idx.iter().any(|&i| i >= rows * cols) {
            return Err(AdError::Invalid {
                op: "scatter",
                msg: format!("{} values into {rows}x{cols}", self.len()),
            });
        }
        let out = self.with(|v, _, _| {
            let mut o = vec![0.0; rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                o[i] += v[k];
            }
            o
        });
        Ok(self
            .g
            .push(rows, cols, Val::Own(out), Op::Scatter(self.id, idx.to_vec())))
    }

    pub fn stop_gradient(self) -> Var<'g> {
        let (out, r, c) = self.with(|v, r, c| (v.to_vec(), r, c));
        self.g.push(r, c, Val::Own(out), Op::StopGrad)
    }

    /// Elementwise `t ln(t/m) - t + m` with `self` as `t` (`0 ln 0 = 0`).
    pub fn bregman(self, model: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&model);
        if self.shape() != model.shape() {
            return Err(AdError::Shape {
                op: "bregman",
                a: self.shape(),
                b: model.shape(),
            });
        }
        let (r, c) = self.shape();
        let out = {
            let nodes = self.g.nodes.borrow();
            let (vt, vm) = (nodes[self.id].val.get(), nodes[model.id].val.get());
            vt.iter()
                .zip(vm)
                .map(|(&t, &m)| if t > 0.0 { t * (t / m).ln() - t + m } else { m })
                .collect()
        };
        Ok(self.g.push(r, c, Val::Own(out), Op::Bregman(self.id, model.id)))
    }
}

fn concat<'g>(parts: &[Var<'g>], by_cols: bool) -> Result<Var<'g>> {
    let first = parts.first().ok_or(AdError::Invalid {
        op: "concat",
        msg: "nothing to concatenate".into(),
    })?;
    let g = first.g;
    let (r0, c0) = first.shape();
    for p in parts {
        first.same_graph(p);
        let (r, c) = p.shape();
        if (by_cols && r != r0) || (!by_cols && c != c0) {
            return Err(AdError::Shape {
                op: if by_cols { "concat_cols" } else { "concat_rows" },
                a: (r0, c0),
                b: (r, c),
            });
        }
    }
    let nodes = g.nodes.borrow();
    let (rows, cols, out) = if by_cols {
        let cols: usize = parts.iter().map(|p| nodes[p.id].cols).sum();
        let mut out = Vec::with_capacity(r0 * cols);
        for r in 0..r0 {
            for p in parts {
                let pc = nodes[p.id].cols;
                out.extend_from_slice(&nodes[p.id].val.get()[r * pc..(r + 1) * pc]);
            }
        }
        (r0, cols, out)
    } else {
        let rows: usize = parts.iter().map(|p| nodes[p.id].rows).sum();
        let mut out = Vec::with_capacity(rows * c0);
        for p in parts {
            out.extend_from_slice(nodes[p.id].val.get());
        }
        (rows, c0, out)
    };
    drop(nodes);
    let ids = parts.iter().map(|p| p.id).collect();
    let op = if by_cols {
        Op::ConcatCols(ids)
    } else {
        Op::ConcatRows(ids)
    };
    Ok(g.push(rows, cols, Val::Own(out), op))
}

pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    concat(parts, true)
}

pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    concat(parts, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values() {
        let g = Graph::new();
        let a = g.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::new(2, 2, vec![0.5, -1.0, 2.0, 0.0]));
        assert_eq!(a.matmul(b).unwrap().value().data, vec![4.5, -1.0, 9.5, -3.0]);
        assert_eq!(a.matmul_t(b).unwrap().value().data, vec![-1.5, 2.0, -2.5, 6.0]);
        assert_eq!(a.transpose().value().data, vec![1.0, 3.0, 2.0, 4.0]);
        let row = g.constant(Tensor::row(vec![10.0, 20.0]));
        assert_eq!(a.add(row).unwrap().value().data, vec![11.0, 22.0, 13.0, 24.0]);
        let sm = a.softmax_rows().value();
        assert!((sm.data[0] + sm.data[1] - 1.0).abs() < 1e-15);
        assert!(a.add(g.constant(Tensor::zeros(3, 1))).is_err());
        assert_eq!(a.sum_rows().value().data, vec![3.0, 7.0]);
        assert_eq!(a.sum_cols().value().data, vec![4.0, 6.0]);
    }

    #[test]
    fn backward_of_simple_expression() {
        let g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let y = x.mul(x).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
        let nonscalar = g.backward(x);
        assert!(nonscalar.is_err());
    }

    #[test]
    fn stop_gradient_blocks() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = x.mul(x.stop_gradient()).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[3.0]);
    }

    #[test]
    fn params_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, -2.0]), true);
        let g = Graph::new();
        let p = g.param(&store, w);
        let y = p.mul(p).unwrap().sum().add(p.sum()).unwrap();
        let grads = g.backward(y).unwrap();
        let mut gs = GradStore::zeros_like(&store);
        grads.accumulate(&mut gs, 0.5);
        assert_eq!(gs.get(w), &[1.5, -1.5]);
    }
}
