//! Reverse-mode tape over a fixed set of dense-matrix primitives.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward sweep is a single reverse walk. Binary
//! elementwise ops broadcast their *right* operand when it is `1 x n`,
//! `m x 1` or `1 x 1`.

use super::mat::{sigmoid, Mat};
use super::param::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param {
        group: usize,
        index: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    StackRows(Vec<Var>),
    MergeCols {
        a: Var,
        a_cols: Vec<usize>,
        b: Var,
        b_cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    // False for constants and anything computed only from constants.
    live: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

fn broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    assert!(
        broadcast_ok(a.shape(), b.shape()),
        "cannot broadcast {:?} onto {:?}",
        b.shape(),
        a.shape()
    );
    let (rows, cols) = a.shape();
    let mut out = Mat::zeros(rows, cols);
    let br = b.rows() > 1;
    let bc = b.cols() > 1;
    for r in 0..rows {
        for c in 0..cols {
            let bv = b.get(if br { r } else { 0 }, if bc { c } else { 0 });
            out.set(r, c, f(a.get(r, c), bv));
        }
    }
    out
}

/// Sums `g` down to `shape` (the inverse of broadcasting).
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let live = match &op {
            Op::Leaf => false,
            Op::Param { .. } => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.live(*a) || self.live(*b)
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::SmoothL1(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::NormalizeRows(a)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::SelectCols(a, _) => self.live(*a),
            Op::StackRows(parts) => parts.iter().any(|p| self.live(*p)),
            Op::MergeCols { a, b, .. } => self.live(*a) || self.live(*b),
        };
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that is not a parameter but still receives a gradient.
    pub fn variable(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].live = true;
        v
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::scalar(v))
    }

    /// Leaf tied to parameter `index` of parameter group `group`.
    pub fn param(&mut self, group: usize, index: usize, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param { group, index })
    }

    /// Binds every parameter of `set` as a leaf; returns vars indexed like the set.
    pub fn bind(&mut self, group: usize, set: &ParamSet) -> Vec<Var> {
        set.iter()
            .enumerate()
            .map(|(i, p)| self.param(group, i, &p.value))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise smooth-L1 of a difference: `0.5 x^2` if `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(smooth_l1);
        self.push(v, Op::SmoothL1(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `m x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::col_vector(
            &(0..m.rows())
                .map(|r| m.row(r).iter().sum())
                .collect::<Vec<_>>(),
        );
        self.push(v, Op::SumRows(a))
    }

    /// Per-column sums, `1 x n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            out.row_mut(r)
                .copy_from_slice(&super::mat::softmax(m.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Scales each row to unit L2 norm. Zero rows produce non-finite output.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows() {
            let n = super::mat::norm2(m.row(r));
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        self.push(out, Op::NormalizeRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Rows `idx` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(idx.len(), m.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(m.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Mat::zeros(m.rows(), idx.len());
        for r in 0..m.rows() {
            for (o, &c) in idx.iter().enumerate() {
                out.set(r, o, m.get(r, c));
            }
        }
        self.push(out, Op::SelectCols(a, idx.to_vec()))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(m.data());
        }
        let rows = data.len() / cols;
        let out = Mat::from_vec(rows, cols, data).expect("non-empty stack");
        self.push(out, Op::StackRows(parts.to_vec()))
    }

    /// Interleaves the columns of `a` and `b` into positions `a_cols` / `b_cols`.
    pub fn merge_cols(&mut self, a: Var, a_cols: &[usize], b: Var, b_cols: &[usize]) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows());
        assert_eq!(ma.cols(), a_cols.len());
        assert_eq!(mb.cols(), b_cols.len());
        let width = a_cols.len() + b_cols.len();
        let mut out = Mat::zeros(ma.rows(), width);
        for r in 0..ma.rows() {
            for (i, &c) in a_cols.iter().enumerate() {
                out.set(r, c, ma.get(r, i));
            }
            for (i, &c) in b_cols.iter().enumerate() {
                out.set(r, c, mb.get(r, i));
            }
        }
        self.push(
            out,
            Op::MergeCols {
                a,
                a_cols: a_cols.to_vec(),
                b,
                b_cols: b_cols.to_vec(),
            },
        )
    }

    /// Backpropagates from a `1 x 1` node. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].live {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every leaf bound to `group` into `set`.
    pub fn accumulate(&self, group: usize, set: &mut ParamSet) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param { group: gr, index }, Some(g)) = (&node.op, g) {
                if *gr == group {
                    set.get_mut(*index).grad.add_assign(g);
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let live = |v: Var| self.nodes[v.0].live;
        let mut send = |v: Var, d: Mat| {
            if !live(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if live(*a) {
                    send(*a, g.matmul(&val(*b).transpose()));
                }
                if live(*b) {
                    send(*b, val(*a).transpose().matmul(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, broadcast(g, vb, |x, y| x * y));
                let gb = g.zip_map(va, |x, y| x * y);
                send(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::Tanh(a) => send(*a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => send(*a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Exp(a) => send(*a, g.zip_map(y, |g, e| g * e)),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::SmoothL1(a) => send(*a, g.zip_map(val(*a), |g, x| g * smooth_l1_grad(x))),
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row).iter_mut().for_each(|x| *x = g.get(row, 0));
                }
                send(*a, d);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row).copy_from_slice(g.row(0));
                }
                send(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - gy));
                    }
                }
                send(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                    }
                }
                send(*a, d);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = super::mat::norm2(x.row(r));
                    let yg: f64 = y.row(r).iter().zip(g.row(r)).map(|(y, g)| y * g).sum();
                    for c in 0..x.cols() {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * yg) / n);
                    }
                }
                send(*a, d);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (acc, v) in d.row_mut(src).iter_mut().zip(g.row(o)) {
                        *acc += v;
                    }
                }
                send(*a, d);
            }
            Op::SelectCols(a, idx) => {
                let x = val(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &c) in idx.iter().enumerate() {
                        let v = d.get(r, c) + g.get(r, o);
                        d.set(r, c, v);
                    }
                }
                send(*a, d);
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let d = Mat::from_vec(r, c, g.data()[start * c..(start + r) * c].to_vec())
                        .expect("slice shape");
                    start += r;
                    send(p, d);
                }
            }
            Op::MergeCols {
                a,
                a_cols,
                b,
                b_cols,
            } => {
                let rows = g.rows();
                let mut da = Mat::zeros(rows, a_cols.len());
                let mut db = Mat::zeros(rows, b_cols.len());
                for r in 0..rows {
                    for (i, &c) in a_cols.iter().enumerate() {
                        da.set(r, i, g.get(r, c));
                    }
                    for (i, &c) in b_cols.iter().enumerate() {
                        db.set(r, i, g.get(r, c));
                    }
                }
                send(*a, da);
                send(*b, db);
            }
        }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
