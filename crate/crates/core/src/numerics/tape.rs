//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value. Nodes that do
//! not depend on any [`Tape::leaf`] are marked constant and skipped by the
//! reverse sweep.

use std::sync::Arc;

use super::matrix::{matmul_nt_into, matmul_tn_into, Matrix};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// `Rows` collapses the row dimension (one value per column).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    All,
}

/// One weighted message `out[dst] += coef * w[edge] * x[src]`.
///
/// `edge == None` means the message carries weight 1 regardless of the
/// edge-weight input (self-loops).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Message {
    pub src: u32,
    pub dst: u32,
    pub coef: f64,
    pub edge: Option<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct MessageList {
    pub num_nodes: usize,
    pub messages: Vec<Message>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    StandardizeCols {
        input: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Reduce {
        input: Var,
        op: Reduction,
        axis: Axis,
        argmax: Vec<usize>,
    },
    GatherRows(Var, Arc<Vec<usize>>),
    Propagate {
        input: Var,
        weight: Option<Var>,
        messages: Arc<MessageList>,
    },
    SegmentMean {
        input: Var,
        segment: Arc<Vec<Option<usize>>>,
        counts: Vec<usize>,
    },
    LogSoftmax(Var),
    PickCols(Var, Arc<Vec<usize>>),
    NormalizeRows(Var, Vec<f64>),
    PairLogSumExp(Var, Arc<Vec<bool>>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

const NORM_EPS: f64 = 1e-12;

/// Per-column mean and biased variance.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    let nf = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    (mean, var)
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.adjoints.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(Op::Transpose(a), value, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, t))
    }

    /// Entrywise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, t))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| s * x);
        let t = self.tracked(&[a]);
        self.push(Op::Scale(a, s), value, t)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let t = self.tracked(&[a]);
        self.push(Op::AddScalar(a), value, t)
    }

    /// `a (n x d) + b (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return shape_err(format!(
                "add_row: {}x{} plus row {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            ));
        }
        let mut value = av.clone();
        let d = av.cols();
        for r in 0..av.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(&bv.data()[..d]) {
                *o += b;
            }
        }
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::AddRow(a, b), value, t))
    }

    /// `a (n x d) * g (1 x d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        let (av, gv) = (self.value(a), self.value(g));
        if gv.rows() != 1 || gv.cols() != av.cols() {
            return shape_err(format!(
                "mul_row: {}x{} times row {}x{}",
                av.rows(),
                av.cols(),
                gv.rows(),
                gv.cols()
            ));
        }
        let mut value = av.clone();
        let d = av.cols();
        for r in 0..av.rows() {
            for (o, &s) in value.row_mut(r).iter_mut().zip(&gv.data()[..d]) {
                *o *= s;
            }
        }
        let t = self.tracked(&[a, g]);
        Ok(self.push(Op::MulRow(a, g), value, t))
    }

    /// Each column shifted to zero mean and scaled to unit (biased) variance,
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.shape();
        if n == 0 {
            return shape_err("standardize_cols on an empty matrix");
        }
        let (mean, var) = column_moments(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = x.clone();
        for r in 0..n {
            for (c, o) in value.row_mut(r).iter_mut().enumerate().take(d) {
                *o = (*o - mean[c]) * inv_std[c];
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Op::StandardizeCols { input: a, inv_std }, value, t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let t = self.tracked(&[a]);
        self.push(Op::Relu(a), value, t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(&[a]);
        self.push(Op::Sigmoid(a), value, t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let t = self.tracked(&[a]);
        self.push(Op::Tanh(a), value, t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let t = self.tracked(&[a]);
        self.push(Op::Exp(a), value, t)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of a non-positive entry".into()));
        }
        let value = self.value(a).map(f64::ln);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Log(a), value, t))
    }

    pub fn reduce(&mut self, a: Var, op: Reduction, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Domain("reduction over an empty matrix".into()));
        }
        let (rows, cols) = x.shape();
        let (out_rows, out_cols) = match axis {
            Axis::Rows => (1, cols),
            Axis::Cols => (rows, 1),
            Axis::All => (1, 1),
        };
        let group = |o: usize| -> Box<dyn Iterator<Item = usize>> {
            match axis {
                Axis::Rows => Box::new((0..rows).map(move |r| r * cols + o)),
                Axis::Cols => Box::new((0..cols).map(move |c| o * cols + c)),
                Axis::All => Box::new(0..rows * cols),
            }
        };
        let count = (rows * cols) / (out_rows * out_cols);
        let data = x.data();
        let mut out = Vec::with_capacity(out_rows * out_cols);
        let mut argmax = Vec::new();
        for o in 0..out_rows * out_cols {
            match op {
                Reduction::Sum => out.push(group(o).map(|i| data[i]).sum()),
                Reduction::Mean => out.push(group(o).map(|i| data[i]).sum::<f64>() / count as f64),
                Reduction::Max => {
                    // strict `>` keeps the lowest index on ties
                    let best = group(o)
                        .reduce(|b, i| if data[i] > data[b] { i } else { b })
                        .expect("non-empty group");
                    argmax.push(best);
                    out.push(data[best]);
                }
            }
        }
        let value = Matrix::from_vec(out_rows, out_cols, out)?;
        let t = self.tracked(&[a]);
        Ok(self.push(
            Op::Reduce {
                input: a,
                op,
                axis,
                argmax,
            },
            value,
            t,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Sum, Axis::All)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Mean, Axis::All)
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return shape_err(format!("gather row {bad} of {}", x.rows()));
        }
        let mut value = Matrix::zeros(idx.len(), x.cols());
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).copy_from_slice(x.row(i));
        }
        let t = self.tracked(&[a]);
        Ok(self.push(Op::GatherRows(a, idx), value, t))
    }

    /// Weighted message passing: `out[dst] += coef * w[edge] * x[src]`.
    ///
    /// `weight`, when present, is an `m x 1` column of per-edge weights.
    pub fn propagate(
        &mut self,
        x: Var,
        weight: Option<Var>,
        messages: Arc<MessageList>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != messages.num_nodes {
            return shape_err(format!(
                "propagate: {} feature rows for {} nodes",
                xv.rows(),
                messages.num_nodes
            ));
        }
        let wv = match weight {
            Some(w) => {
                let wv = self.value(w);
                if wv.cols() != 1 {
                    return shape_err("propagate: edge weights must be a column");
                }
                let needed = messages
                    .messages
                    .iter()
                    .filter_map(|m| m.edge)
                    .max()
                    .map_or(0, |e| e as usize + 1);
                if wv.rows() < needed {
                    return shape_err(format!(
                        "propagate: {} edge weights, message references edge {}",
                        wv.rows(),
                        needed - 1
                    ));
                }
                Some(wv.data())
            }
            None => None,
        };
        let d = xv.cols();
        let mut value = Matrix::zeros(xv.rows(), d);
        for m in &messages.messages {
            let w = match (m.edge, wv) {
                (Some(e), Some(wv)) => m.coef * wv[e as usize],
                _ => m.coef,
            };
            if w == 0.0 {
                continue;
            }
            let (s, t) = (m.src as usize, m.dst as usize);
            let src = &xv.data()[s * d..(s + 1) * d];
            let dst = &mut value.data_mut()[t * d..(t + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let t = self.tracked(&[x]) || weight.is_some_and(|w| self.is_tracked(w));
        Ok(self.push(
            Op::Propagate {
                input: x,
                weight,
                messages,
            },
            value,
            t,
        ))
    }

    /// Per-segment mean of rows. Rows with `None` are excluded; empty segments yield zero rows.
    pub fn segment_mean(
        &mut self,
        a: Var,
        segment: Arc<Vec<Option<usize>>>,
        num_segments: usize,
    ) -> Result<Var> {
        let x = self.value(a);
        if segment.len() != x.rows() {
            return shape_err(format!(
                "segment_mean: {} segment ids for {} rows",
                segment.len(),
                x.rows()
            ));
        }
        let mut counts = vec![0usize; num_segments];
        let mut value = Matrix::zeros(num_segments, x.cols());
        for (r, s) in segment.iter().enumerate() {
            if let Some(s) = *s {
                if s >= num_segments {
                    return shape_err(format!("segment id {s} >= {num_segments}"));
                }
                counts[s] += 1;
                for (o, &v) in value.row_mut(s).iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                value.row_mut(s).iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(
            Op::SegmentMean {
                input: a,
                segment,
                counts,
            },
            value,
            t,
        ))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = self.tracked(&[a]);
        self.push(Op::LogSoftmax(a), value, t)
    }

    /// Column vector with entry `i` equal to `a[i, idx[i]]`.
    pub fn pick_cols(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return shape_err(format!("pick_cols: {} indices for {} rows", idx.len(), x.rows()));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= x.cols()) {
            return shape_err(format!("pick_cols: column {bad} of {}", x.cols()));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let value = Matrix::column(&data);
        let t = self.tracked(&[a]);
        Ok(self.push(Op::PickCols(a, idx), value, t))
    }

    /// Scales each row to unit Euclidean norm (rows shorter than 1e-12 are divided by 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            value.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let t = self.tracked(&[a]);
        self.push(Op::NormalizeRows(a, norms), value, t)
    }

    /// For a square similarity matrix `s`, returns `L` with
    /// `L[i][j] = log(exp(s[i][j]) + sum_{n: neg[i][n]} exp(s[i][n]))`.
    pub fn pair_logsumexp(&mut self, s: Var, negatives: Arc<Vec<bool>>) -> Result<Var> {
        let x = self.value(s);
        let n = x.rows();
        if x.cols() != n || negatives.len() != n * n {
            return shape_err("pair_logsumexp expects an n x n matrix and n*n mask");
        }
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            let row = x.row(i);
            let c = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let neg_sum: f64 = (0..n)
                .filter(|&k| negatives[i * n + k])
                .map(|k| (row[k] - c).exp())
                .sum();
            for j in 0..n {
                value.set(i, j, c + ((row[j] - c).exp() + neg_sum).ln());
            }
        }
        let t = self.tracked(&[s]);
        Ok(self.push(Op::PairLogSumExp(s, negatives), value, t))
    }

    /// Sign pattern of every ReLU input recorded so far, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                    matmul_nt_into(g, val(*b), &mut ga);
                    acc(*a, ga);
                }
                if self.is_tracked(*b) {
                    let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                    matmul_tn_into(val(*a), g, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y).expect("shape"));
                }
                if self.is_tracked(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y).expect("shape"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| s * v)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.is_tracked(*b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::MulRow(a, s) => {
                let sv = val(*s);
                if self.is_tracked(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, &k) in ga.row_mut(r).iter_mut().zip(sv.data()) {
                            *o *= k;
                        }
                    }
                    acc(*a, ga);
                }
                if self.is_tracked(*s) {
                    let av = val(*a);
                    let mut gs = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &x) in gs.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gv * x;
                        }
                    }
                    acc(*s, gs);
                }
            }
            Op::StandardizeCols { input, inv_std } => {
                // dx = inv_std / n * (n dy - sum(dy) - y * sum(dy * y))
                let (n, d) = g.shape();
                let mut sum_g = vec![0.0; d];
                let mut sum_gy = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        sum_g[c] += g.get(r, c);
                        sum_gy[c] += g.get(r, c) * out.get(r, c);
                    }
                }
                let nf = n as f64;
                let mut gx = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        let v = inv_std[c] / nf * (nf * g.get(r, c) - sum_g[c] - out.get(r, c) * sum_gy[c]);
                        gx.set(r, c, v);
                    }
                }
                acc(*input, gx);
            }
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape"),
            ),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, s| gv * s * (1.0 - s)).expect("shape")),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gv, t| gv * (1.0 - t * t)).expect("shape")),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, e| gv * e).expect("shape")),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv / x).expect("shape")),
            Op::Reduce {
                input,
                op,
                axis,
                argmax,
            } => {
                let x = val(*input);
                let (rows, cols) = x.shape();
                let mut gx = Matrix::zeros(rows, cols);
                let out_index = |r: usize, c: usize| match axis {
                    Axis::Rows => c,
                    Axis::Cols => r,
                    Axis::All => 0,
                };
                match op {
                    Reduction::Sum | Reduction::Mean => {
                        let scale = if *op == Reduction::Mean {
                            (out.len() as f64) / (rows * cols) as f64
                        } else {
                            1.0
                        };
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.set(r, c, scale * g.data()[out_index(r, c)]);
                            }
                        }
                    }
                    Reduction::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx.data_mut()[i] += g.data()[o];
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, gx);
            }
            Op::Propagate {
                input,
                weight,
                messages,
            } => {
                let x = val(*input);
                let d = x.cols();
                let wv = weight.map(|w| val(w).data());
                let want_x = self.is_tracked(*input);
                let want_w = weight.is_some_and(|w| self.is_tracked(w));
                let mut gx = want_x.then(|| Matrix::zeros(x.rows(), d));
                let mut gw = weight
                    .filter(|_| want_w)
                    .map(|w| Matrix::zeros(val(w).rows(), 1));
                for m in &messages.messages {
                    let (s, t) = (m.src as usize, m.dst as usize);
                    let g_dst = &g.data()[t * d..(t + 1) * d];
                    let w = match (m.edge, wv) {
                        (Some(e), Some(wv)) => m.coef * wv[e as usize],
                        _ => m.coef,
                    };
                    if let Some(gx) = gx.as_mut() {
                        if w != 0.0 {
                            let dst = &mut gx.data_mut()[s * d..(s + 1) * d];
                            for (o, &v) in dst.iter_mut().zip(g_dst) {
                                *o += w * v;
                            }
                        }
                    }
                    if let (Some(gw), Some(e)) = (gw.as_mut(), m.edge) {
                        let x_src = &x.data()[s * d..(s + 1) * d];
                        let dot: f64 = x_src.iter().zip(g_dst).map(|(a, b)| a * b).sum();
                        gw.data_mut()[e as usize] += m.coef * dot;
                    }
                }
                if let Some(gx) = gx {
                    acc(*input, gx);
                }
                if let (Some(gw), Some(w)) = (gw, *weight) {
                    acc(w, gw);
                }
            }
            Op::SegmentMean {
                input,
                segment,
                counts,
            } => {
                let x = val(*input);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for (r, s) in segment.iter().enumerate() {
                    if let Some(s) = *s {
                        let inv = 1.0 / counts[s] as f64;
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = inv * v;
                        }
                    }
                }
                acc(*input, gx);
            }
            Op::LogSoftmax(a) => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &y) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= y.exp() * gsum;
                    }
                }
                acc(*a, gx);
            }
            Op::PickCols(a, idx) => {
                let x = val(*a);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for (r, &c) in idx.iter().enumerate() {
                    gx.set(r, c, g.data()[r]);
                }
                acc(*a, gx);
            }
            Op::NormalizeRows(a, norms) => {
                let x = val(*a);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = norms[r];
                    let gr = g.row(r);
                    let yr = out.row(r);
                    if n > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &y) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - y * dot) / n;
                        }
                    } else {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(gr) {
                            *o = gv / n;
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::PairLogSumExp(s, neg) => {
                let x = val(*s);
                let n = x.rows();
                let mut gx = Matrix::zeros(n, n);
                for i in 0..n {
                    let row = x.row(i);
                    for j in 0..n {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let l = out.get(i, j);
                        let cur = gx.get(i, j);
                        gx.set(i, j, cur + gij * (row[j] - l).exp());
                        for k in 0..n {
                            if neg[i * n + k] {
                                let cur = gx.get(i, k);
                                gx.set(i, k, cur + gij * (row[k] - l).exp());
                            }
                        }
                    }
                }
                acc(*s, gx);
            }
        }
    }
}
