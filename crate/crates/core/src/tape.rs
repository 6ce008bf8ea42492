//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as leaves bound to a [`ParamStore`] slot, and [`Tape::backward`] returns
//! their gradients. Tapes are single-owner; data parallelism builds one tape
//! per instance and sums the resulting [`Gradients`].

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Normalize(Var, f64),
    Softmax(Var),
    LogSoftmax(Var, Arc<[bool]>),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PairwiseAdd(Var, Var),
    Reshape(Var),
    PickSum(Var, Vec<(usize, usize, f64)>),
    Bce(Var, Vec<f64>),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the binary
/// cross entropy.
pub const PROB_EPS: f64 = 1e-7;

pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: Vec::new(),
            track: true,
        }
    }

    /// A tape for evaluation; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
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
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_with(Arc::new(value), op, needs_grad)
    }

    fn push_with(&mut self, value: Arc<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_with(Arc::new(value), Op::Leaf, false)
    }

    /// Binds a parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let needs_grad = self.track && store.is_trainable(id);
        let v = self.push_with(store.shared(id), Op::Param(id), needs_grad);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(value, Op::Normalize(a, eps), &[a])
    }

    /// Row-wise softmax restricted to columns where `mask` is true; masked
    /// columns come out exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.ncols(), mask.len(), "softmax mask width");
        for mut row in value.rows_mut() {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (x, &m) in row.iter_mut().zip(mask.iter()) {
                *x = if m { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            if sum > 0.0 {
                row.mapv_inplace(|x| x / sum);
            }
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax restricted to `mask`; masked columns are `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.ncols(), mask.len(), "log_softmax mask width");
        for mut row in value.rows_mut() {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| (x - max).exp())
                .sum();
            let lse = max + sum.ln();
            for (x, &m) in row.iter_mut().zip(mask.iter()) {
                *x = if m { *x - lse } else { f64::NEG_INFINITY };
            }
        }
        self.push(value, Op::LogSoftmax(a, mask), &[a])
    }

    /// Row lookup `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        self.push(value, Op::Gather(table, indices), &[table])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        self.push(value, Op::ConcatRows(parts.clone()), &parts)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        self.push(value, Op::ConcatCols(parts.clone()), &parts)
    }

    /// For `q: n × d` and `s: l × d`, returns the `(n·l) × d` matrix whose
    /// row `j·l + i` is `q[j] + s[i]`.
    pub fn pairwise_add(&mut self, q: Var, seq: Var) -> Var {
        let (qv, sv) = (self.value(q), self.value(seq));
        let (n, l, d) = (qv.nrows(), sv.nrows(), qv.ncols());
        assert_eq!(sv.ncols(), d, "pairwise_add widths");
        let mut value = Mat::zeros((n * l, d));
        for j in 0..n {
            let mut block = value.slice_mut(s![j * l..(j + 1) * l, ..]);
            block.assign(sv);
            block += &qv.row(j);
        }
        self.push(value, Op::PairwiseAdd(q, seq), &[q, seq])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("reshape size");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// `Σ w · a[r, c]` over the given entries, as a `1 × 1` matrix.
    pub fn pick_sum(&mut self, a: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let av = self.value(a);
        let total: f64 = entries.iter().map(|&(r, c, w)| w * av[[r, c]]).sum();
        self.push(Mat::from_elem((1, 1), total), Op::PickSum(a, entries), &[a])
    }

    /// Mean binary cross entropy between probabilities `p` (any shape,
    /// row-major) and `targets`.
    pub fn bce(&mut self, p: Var, targets: Vec<f64>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce target count");
        let n = targets.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        self.push(Mat::from_elem((1, 1), total / n), Op::Bce(p, targets), &[p])
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Back-propagates from the `1 × 1` variable `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let send = |grads: &mut Vec<Option<Mat>>, to: Var, delta: Mat| {
                if !self.nodes[to.0].needs_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    send(&mut grads, *a, g.dot(&self.value(*b).t()));
                    send(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    send(&mut grads, *a, g.dot(self.value(*b)));
                    send(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    send(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r);
                    let av = self.value(*a);
                    send(&mut grads, *r, (&g * av).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(&mut grads, *a, &g * rv);
                }
                Op::Scale(a, c) => send(&mut grads, *a, g * *c),
                Op::Tanh(a) => {
                    let d = ndarray::Zip::from(&g).and(&**y).map_collect(|&g, &y| g * (1.0 - y * y));
                    send(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = ndarray::Zip::from(&g).and(&**y).map_collect(|&g, &y| g * y * (1.0 - y));
                    send(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = ndarray::Zip::from(&g).and(x).map_collect(|&g, &x| g * gelu_grad(x));
                    send(&mut grads, *a, d);
                }
                Op::Normalize(a, eps) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.raw_dim());
                    for ((mut dr, gr), (xr, yr)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows())
                        .zip(x.rows().into_iter().zip(y.rows()))
                    {
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.sum() / n;
                        let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *dv = inv * (gv - g_mean - yv * gy_mean);
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let mut d = Mat::zeros(y.raw_dim());
                    for ((mut dr, gr), yr) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::LogSoftmax(a, mask) => {
                    let mut d = Mat::zeros(y.raw_dim());
                    for ((mut dr, gr), yr) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let gsum: f64 = gr
                            .iter()
                            .zip(mask.iter())
                            .filter(|(_, &m)| m)
                            .map(|(&g, _)| g)
                            .sum();
                        for (c, dv) in dr.iter_mut().enumerate() {
                            if mask[c] {
                                *dv = gr[c] - yr[c].exp() * gsum;
                            }
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::Gather(table, indices) => {
                    let mut d = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    send(&mut grads, *table, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        send(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        send(&mut grads, p, g.slice(s![.., at..at + n]).to_owned());
                        at += n;
                    }
                }
                Op::PairwiseAdd(q, seq) => {
                    let (n, l) = (self.value(*q).nrows(), self.value(*seq).nrows());
                    let mut dq = Mat::zeros(self.value(*q).raw_dim());
                    let mut ds = Mat::zeros(self.value(*seq).raw_dim());
                    for j in 0..n {
                        let block = g.slice(s![j * l..(j + 1) * l, ..]);
                        dq.row_mut(j).assign(&block.sum_axis(Axis(0)));
                        ds += &block;
                    }
                    send(&mut grads, *q, dq);
                    send(&mut grads, *seq, ds);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    send(&mut grads, *a, Mat::from_shape_vec(shape, flat).expect("reshape"));
                }
                Op::PickSum(a, entries) => {
                    let gs = g[[0, 0]];
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for &(r, c, w) in entries {
                        d[[r, c]] += w * gs;
                    }
                    send(&mut grads, *a, d);
                }
                Op::Bce(p, targets) => {
                    let gs = g[[0, 0]];
                    let pv = self.value(*p);
                    let n = targets.len() as f64;
                    let flat: Vec<f64> = pv
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                                0.0
                            } else {
                                -gs * (y / p - (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    send(&mut grads, *p, Mat::from_shape_vec(pv.raw_dim(), flat).expect("bce"));
                }
            }
        }
        out
    }
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, g: Mat) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        match &mut self.slots[id.index()] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId::from_index(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
