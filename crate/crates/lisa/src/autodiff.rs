//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every differentiable quantity in this crate lives on a [`Tape`]: forward
//! calls push nodes and return lightweight [`Var`] handles; [`Tape::backward`]
//! walks the tape in reverse and accumulates exact gradients into every leaf.
//! All values are `Array2<f64>`; vectors are stored as `n x 1` columns and
//! scalars as `1 x 1`.
//!
//! The op set is deliberately small: dense linear algebra, pointwise
//! nonlinearities, and the handful of graph-structured gather/scatter ops
//! needed by weighted message passing (edge aggregation, degree accumulation,
//! segment pooling, edge-mask averaging).

use ndarray::{Array1, Array2};
use std::sync::Arc;

use crate::error::{LisaError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shared directed edge list `(src, dst)`.
pub type Edges = Arc<Vec<(usize, usize)>>;
/// Shared node-to-segment assignment.
pub type Segments = Arc<Vec<usize>>;

enum Op {
    /// Gradient-carrying input (parameters, sampled masks under replay, ...).
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// `(n x d) + (1 x d)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Recip(Var),
    /// Pass-through gradient strictly inside `(lo, hi)`, zero outside.
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    /// Scale row `i` of the first operand by entry `i` of an `n x 1` vector.
    RowScale(Var, Var),
    /// Broadcast a `1 x 1` scalar to `rows x 1`.
    BroadcastScalar(Var),
    /// Per directed edge `e = (u, v)`: `0.5 * (m[u] + m[v])` of an `n x 1` input.
    EdgeAverage(Var, Edges),
    /// Weighted neighbor aggregation: `out[v] += w[e] * h[u]` for `e = (u, v)`.
    EdgeAggregate { h: Var, w: Var, edges: Edges },
    /// Weighted in-degree: `out[v] += w[e]` for `e = (u, v)`.
    EdgeDegree { w: Var, edges: Edges },
    /// Sum rows of an `n x d` input into `num_segments x d` by assignment.
    SegmentSum { x: Var, segments: Segments },
    /// Row gather: `out[i] = x[indices[i]]`.
    TakeRows { x: Var, indices: Arc<Vec<usize>> },
    /// Per-row `-log softmax(row)[label]`, producing `n x 1`.
    CrossEntropyRows { logits: Var, labels: Arc<Vec<usize>> },
    /// Per-row stabilized `log(sum(exp(row)))`, producing `n x 1`.
    LogSumExpRows(Var),
    /// Stack `1 x 1` scalars into an `m x 1` column.
    StackScalars(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records the forward computation and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node as a plain scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Column-vector leaf from a 1-D array.
    pub fn leaf_col(&mut self, value: &Array1<f64>) -> Var {
        let n = value.len();
        self.leaf(value.clone().into_shape_with_order((n, 1)).expect("column reshape"))
    }

    pub fn constant_col(&mut self, value: &Array1<f64>) -> Var {
        let n = value.len();
        self.constant(value.clone().into_shape_with_order((n, 1)).expect("column reshape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), s), Op::MeanAll(a))
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        debug_assert_eq!(sv.ncols(), 1);
        let mut out = xv.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * sv[[i, 0]]);
        }
        self.push(out, Op::RowScale(x, s))
    }

    pub fn broadcast_scalar(&mut self, s: Var, rows: usize) -> Var {
        let v = self.scalar(s);
        self.push(Array2::from_elem((rows, 1), v), Op::BroadcastScalar(s))
    }

    pub fn edge_average(&mut self, m: Var, edges: Edges) -> Var {
        let mv = &self.nodes[m.0].value;
        let mut out = Array2::zeros((edges.len(), 1));
        for (e, &(u, v)) in edges.iter().enumerate() {
            out[[e, 0]] = 0.5 * (mv[[u, 0]] + mv[[v, 0]]);
        }
        self.push(out, Op::EdgeAverage(m, edges))
    }

    pub fn edge_aggregate(&mut self, h: Var, w: Var, edges: Edges, num_nodes: usize) -> Var {
        let hv = &self.nodes[h.0].value;
        let wv = &self.nodes[w.0].value;
        let d = hv.ncols();
        let mut out = Array2::zeros((num_nodes, d));
        for (e, &(u, v)) in edges.iter().enumerate() {
            let weight = wv[[e, 0]];
            if weight != 0.0 {
                for k in 0..d {
                    out[[v, k]] += weight * hv[[u, k]];
                }
            }
        }
        self.push(out, Op::EdgeAggregate { h, w, edges })
    }

    pub fn edge_degree(&mut self, w: Var, edges: Edges, num_nodes: usize) -> Var {
        let wv = &self.nodes[w.0].value;
        let mut out = Array2::zeros((num_nodes, 1));
        for (e, &(_, v)) in edges.iter().enumerate() {
            out[[v, 0]] += wv[[e, 0]];
        }
        self.push(out, Op::EdgeDegree { w, edges })
    }

    pub fn segment_sum(&mut self, x: Var, segments: Segments, num_segments: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let mut out = Array2::zeros((num_segments, d));
        for (i, &seg) in segments.iter().enumerate() {
            for k in 0..d {
                out[[seg, k]] += xv[[i, k]];
            }
        }
        self.push(out, Op::SegmentSum { x, segments })
    }

    pub fn take_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols();
        let mut out = Array2::zeros((indices.len(), d));
        for (i, &idx) in indices.iter().enumerate() {
            for k in 0..d {
                out[[i, k]] = xv[[idx, k]];
            }
        }
        self.push(out, Op::TakeRows { x, indices })
    }

    /// Numerically stabilized per-row cross-entropy against integer labels.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Var {
        let lv = &self.nodes[logits.0].value;
        debug_assert_eq!(lv.nrows(), labels.len());
        let mut out = Array2::zeros((labels.len(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            out[[i, 0]] = lse - row[labels[i]];
        }
        self.push(out, Op::CrossEntropyRows { logits, labels })
    }

    pub fn log_sum_exp_rows(&mut self, logits: Var) -> Var {
        let lv = &self.nodes[logits.0].value;
        let mut out = Array2::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[[i, 0]] = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        }
        self.push(out, Op::LogSumExpRows(logits))
    }

    pub fn stack_scalars(&mut self, parts: Vec<Var>) -> Var {
        let mut out = Array2::zeros((parts.len(), 1));
        for (i, p) in parts.iter().enumerate() {
            out[[i, 0]] = self.scalar(*p);
        }
        self.push(out, Op::StackScalars(parts))
    }

    /// Population variance of an `m x 1` column, as a differentiable scalar.
    pub fn variance(&mut self, x: Var) -> Var {
        let rows = self.value(x).nrows();
        let mean = self.mean_all(x);
        let mean_b = self.broadcast_scalar(mean, rows);
        let centered = self.sub(x, mean_b);
        let sq = self.mul(centered, centered);
        self.mean_all(sq)
    }

    /// Reverse pass from a `1 x 1` loss node. Returns one gradient per tape
    /// node, aligned by index; read leaves with [`Tape::grad_of`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(LisaError::ShapeMismatch {
                context: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.nodes[loss.0].value.dim()),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let grow = g
                        .sum_axis(ndarray::Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .expect("row reshape");
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, row, grow);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, a, g.mapv(|x| x * c));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    accumulate(&mut grads, a, g);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let s = &self.nodes[idx].value;
                    let d = s.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, a, &g * &d);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let d = self.nodes[a.0].value.mapv(|x| 1.0 / x);
                    accumulate(&mut grads, a, &g * &d);
                }
                Op::Recip(a) => {
                    let a = *a;
                    let d = self.nodes[a.0].value.mapv(|x| -1.0 / (x * x));
                    accumulate(&mut grads, a, &g * &d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let mask = self.nodes[a.0].value.mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a, &g * &mask);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.raw_dim();
                    accumulate(&mut grads, a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let shape = self.nodes[a.0].value.raw_dim();
                    let n = self.nodes[a.0].value.len() as f64;
                    accumulate(&mut grads, a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::RowScale(x, s) => {
                    let (x, s) = (*x, *s);
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|v| v * sv[[i, 0]]);
                    }
                    let mut gs = Array2::zeros((xv.nrows(), 1));
                    for i in 0..xv.nrows() {
                        let mut acc = 0.0;
                        for k in 0..xv.ncols() {
                            acc += g[[i, k]] * xv[[i, k]];
                        }
                        gs[[i, 0]] = acc;
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, s, gs);
                }
                Op::BroadcastScalar(s) => {
                    let s = *s;
                    accumulate(&mut grads, s, Array2::from_elem((1, 1), g.sum()));
                }
                Op::EdgeAverage(m, edges) => {
                    let m = *m;
                    let edges = edges.clone();
                    let n = self.nodes[m.0].value.nrows();
                    let mut gm = Array2::zeros((n, 1));
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        gm[[u, 0]] += 0.5 * g[[e, 0]];
                        gm[[v, 0]] += 0.5 * g[[e, 0]];
                    }
                    accumulate(&mut grads, m, gm);
                }
                Op::EdgeAggregate { h, w, edges } => {
                    let (h, w) = (*h, *w);
                    let edges = edges.clone();
                    let hv = &self.nodes[h.0].value;
                    let wv = &self.nodes[w.0].value;
                    let d = hv.ncols();
                    let mut gh = Array2::zeros(hv.raw_dim());
                    let mut gw = Array2::zeros(wv.raw_dim());
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        let weight = wv[[e, 0]];
                        let mut dot = 0.0;
                        for k in 0..d {
                            gh[[u, k]] += weight * g[[v, k]];
                            dot += hv[[u, k]] * g[[v, k]];
                        }
                        gw[[e, 0]] = dot;
                    }
                    accumulate(&mut grads, h, gh);
                    accumulate(&mut grads, w, gw);
                }
                Op::EdgeDegree { w, edges } => {
                    let w = *w;
                    let edges = edges.clone();
                    let mut gw = Array2::zeros(self.nodes[w.0].value.raw_dim());
                    for (e, &(_, v)) in edges.iter().enumerate() {
                        gw[[e, 0]] = g[[v, 0]];
                    }
                    accumulate(&mut grads, w, gw);
                }
                Op::SegmentSum { x, segments } => {
                    let x = *x;
                    let segments = segments.clone();
                    let d = self.nodes[x.0].value.ncols();
                    let mut gx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    for (i, &seg) in segments.iter().enumerate() {
                        for k in 0..d {
                            gx[[i, k]] = g[[seg, k]];
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::TakeRows { x, indices } => {
                    let x = *x;
                    let indices = indices.clone();
                    let d = self.nodes[x.0].value.ncols();
                    let mut gx = Array2::zeros(self.nodes[x.0].value.raw_dim());
                    for (i, &idx2) in indices.iter().enumerate() {
                        for k in 0..d {
                            gx[[idx2, k]] += g[[i, k]];
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::CrossEntropyRows { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let lv = &self.nodes[logits.0].value;
                    let mut gl = Array2::zeros(lv.raw_dim());
                    for (i, row) in lv.rows().into_iter().enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for k in 0..row.len() {
                            let softmax = exps[k] / z;
                            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                            gl[[i, k]] = (softmax - onehot) * g[[i, 0]];
                        }
                    }
                    accumulate(&mut grads, logits, gl);
                }
                Op::LogSumExpRows(logits) => {
                    let logits = *logits;
                    let lv = &self.nodes[logits.0].value;
                    let mut gl = Array2::zeros(lv.raw_dim());
                    for (i, row) in lv.rows().into_iter().enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for k in 0..row.len() {
                            gl[[i, k]] = exps[k] / z * g[[i, 0]];
                        }
                    }
                    accumulate(&mut grads, logits, gl);
                }
                Op::StackScalars(parts) => {
                    let parts = parts.clone();
                    for (i, p) in parts.iter().enumerate() {
                        accumulate(&mut grads, *p, Array2::from_elem((1, 1), g[[i, 0]]));
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` was unused.
    pub fn grad_of(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
