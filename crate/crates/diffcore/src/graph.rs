//! Tape of tensor operations with reverse-mode accumulation.
//!
//! A [`Graph`] records every op applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every leaf. A graph supports a
//! single backward pass; build a new graph for the next step.

use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SegmentMean { a: Var, seg: Vec<usize>, counts: Vec<usize> },
    SegmentMax { a: Var, argmax: Vec<usize> },
    RowNorm(Var),
    Huber { a: Var, delta: f64 },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Focal { logits: Var, targets: Vec<usize>, probs: Vec<f64>, gamma: f64, alpha: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    backward_done: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Vec<f64>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a parameter, if it was reachable.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient with respect to a leaf (input, constant or parameter node).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(DiffError::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Leaf node holding data (inputs and constants alike).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// `x · w (+ b)` with `x: n×k`, `w: k×m`, `b: 1×m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims(x);
        let (k2, m) = self.dims(w);
        if k != k2 {
            return shape_err(format!("linear: input width {k} vs weight rows {k2}"));
        }
        if let Some(b) = b {
            if self.value(b).len() != m {
                return shape_err(format!("linear: bias length {} vs width {m}", self.value(b).len()));
            }
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(x).data(), self.value(w).data(), &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return shape_err(format!("matmul: {n}×{k} by {k2}×{m}"));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), self.value(b).data(), &mut out, 0.0);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a `1×m` row to every row of `a: n×m`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(row).len() != m {
            return shape_err(format!("add_row: row length {} vs width {m}", self.value(row).len()));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(m) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(Tensor::matrix(n, m, data), Op::AddRow(a, row)))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return shape_err(format!("mul_const: {} constants for {} values", c.len(), self.value(a).len()));
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(p) => self.dims(*p).0,
            None => return Err(DiffError::Invalid("concat_cols of zero parts".into())),
        };
        let widths: Vec<usize> = parts.iter().map(|p| self.dims(*p).1).collect();
        if let Some(p) = parts.iter().find(|p| self.dims(**p).0 != n) {
            return shape_err(format!("concat_cols: {} rows vs {n}", self.dims(*p).0));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(n, total, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if start > end || end > m {
            return shape_err(format!("slice_cols {start}..{end} of width {m}"));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * m + start..r * m + end]);
        }
        Ok(self.push(Tensor::matrix(n, w, data), Op::SliceCols { a, start, end }))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if start > end || end > n {
            return shape_err(format!("slice_rows {start}..{end} of {n} rows"));
        }
        let data = self.value(a).data()[start * m..end * m].to_vec();
        Ok(self.push(Tensor::matrix(end - start, m, data), Op::SliceRows { a, start }))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, m) = self.dims(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("gather_rows: index {bad} out of {n} rows"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in &idx {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let t = Tensor::matrix(idx.len(), m, data);
        Ok(self.push(t, Op::GatherRows { a, idx }))
    }

    /// Per-segment column means. Every segment in `0..num_segments` must be non-empty.
    pub fn segment_mean(&mut self, a: Var, seg: Vec<usize>, num_segments: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if seg.len() != n {
            return shape_err(format!("segment_mean: {} ids for {n} rows", seg.len()));
        }
        let mut counts = vec![0usize; num_segments];
        let mut sums = vec![0.0; num_segments * m];
        let src = self.value(a).data();
        for (r, &s) in seg.iter().enumerate() {
            if s >= num_segments {
                return Err(DiffError::Invalid(format!("segment id {s} ≥ {num_segments}")));
            }
            counts[s] += 1;
            sums[s * m..(s + 1) * m].iter_mut().zip(&src[r * m..(r + 1) * m]).for_each(|(a, b)| *a += b);
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(DiffError::EmptyGroup(format!("segment {empty} has no rows")));
        }
        for (s, &c) in counts.iter().enumerate() {
            sums[s * m..(s + 1) * m].iter_mut().for_each(|v| *v /= c as f64);
        }
        let t = Tensor::matrix(num_segments, m, sums);
        Ok(self.push(t, Op::SegmentMean { a, seg, counts }))
    }

    /// Per-segment channel-wise max. Gradients route to the first row attaining the max.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let (n, m) = self.dims(a);
        if seg.len() != n {
            return shape_err(format!("segment_max: {} ids for {n} rows", seg.len()));
        }
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; num_segments * m];
        let mut argmax = vec![usize::MAX; num_segments * m];
        for (r, &s) in seg.iter().enumerate() {
            if s >= num_segments {
                return Err(DiffError::Invalid(format!("segment id {s} ≥ {num_segments}")));
            }
            for c in 0..m {
                let v = src[r * m + c];
                let slot = s * m + c;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = r;
                }
            }
        }
        if m > 0 {
            if let Some(empty) = (0..num_segments).find(|s| argmax[s * m] == usize::MAX) {
                return Err(DiffError::EmptyGroup(format!("segment {empty} has no rows")));
            }
        }
        let t = Tensor::matrix(num_segments, m, out);
        Ok(self.push(t, Op::SegmentMax { a, argmax }))
    }

    /// Channel-wise max over all rows, as a `1×m` tensor.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.dims(a).0;
        if n == 0 {
            return Err(DiffError::EmptyGroup("max over zero rows".into()));
        }
        self.segment_max(a, &vec![0; n], 1)
    }

    /// Euclidean norm of every row, `n×1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let src = self.value(a).data();
        let data = (0..n)
            .map(|r| src[r * m..(r + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::matrix(n, 1, data), Op::RowNorm(a))
    }

    /// Elementwise Huber: `0.5x²` for `|x| ≤ δ`, `δ(|x| − 0.5δ)` beyond.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let t = self.map(a, |x| huber_value(x, delta));
        self.push(t, Op::Huber { a, delta })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(logits);
        check_targets(n, c, targets)?;
        let (probs, loss) = softmax_nll(self.value(logits).data(), c, targets);
        let value = if n == 0 { 0.0 } else { loss.iter().sum::<f64>() / n as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(value), op))
    }

    /// Mean over rows of `−α_t (1 − p_t)^γ log p_t`.
    ///
    /// `α_t = alpha` for target class 1 and `1 − alpha` for class 0. With more
    /// than two classes `alpha` weights every non-zero class.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64, alpha: f64) -> Result<Var> {
        let (n, c) = self.dims(logits);
        check_targets(n, c, targets)?;
        let (probs, nll) = softmax_nll(self.value(logits).data(), c, targets);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let q = one_minus_pt(&probs[r * c..(r + 1) * c], t);
            total += focal_alpha(t, alpha) * q.powf(gamma) * nll[r];
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        let op = Op::Focal { logits, targets: targets.to_vec(), probs, gamma, alpha };
        Ok(self.push(Tensor::scalar(value), op))
    }

    /// Reverse pass from a `1×1` node. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Linear { x, w, b } => {
                    let (n, k) = self.dims(*x);
                    let m = node.value.cols();
                    let mut dx = vec![0.0; n * k];
                    gemm_nt(n, m, k, &g, self.value(*w).data(), &mut dx, 0.0);
                    let mut dw = vec![0.0; k * m];
                    gemm_tn(k, n, m, self.value(*x).data(), &g, &mut dw, 0.0);
                    if let Some(b) = b {
                        let mut db = vec![0.0; m];
                        for row in g.chunks_exact(m) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, w.0, dw);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = node.value.cols();
                    let mut da = vec![0.0; n * k];
                    gemm_nt(n, m, k, &g, self.value(*b).data(), &mut da, 0.0);
                    let mut db = vec![0.0; k * m];
                    gemm_tn(k, n, m, self.value(*a).data(), &g, &mut db, 0.0);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b.0, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, a.0, g);
                }
                Op::AddRow(a, row) => {
                    let m = node.value.cols();
                    let mut dr = vec![0.0; m];
                    for chunk in g.chunks_exact(m) {
                        dr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    accumulate(&mut grads, row.0, dr);
                    accumulate(&mut grads, a.0, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::MulConst(a, c) => {
                    let da = g.iter().zip(c).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, a.0, da);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, a.0, g.iter().map(|v| v * s).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, a.0, g),
                Op::Relu(a) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, da);
                }
                Op::Square(a) => {
                    let da = g.iter().zip(self.value(*a).data()).map(|(d, x)| 2.0 * x * d).collect();
                    accumulate(&mut grads, a.0, da);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        let mut dp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p.0, dp);
                        offset += w;
                    }
                }
                Op::SliceCols { a, start, end } => {
                    let (n, m) = self.dims(*a);
                    let w = end - start;
                    let mut da = vec![0.0; n * m];
                    for r in 0..n {
                        da[r * m + start..r * m + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::SliceRows { a, start } => {
                    let (n, m) = self.dims(*a);
                    let mut da = vec![0.0; n * m];
                    da[start * m..start * m + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, a.0, da);
                }
                Op::GatherRows { a, idx } => {
                    let (n, m) = self.dims(*a);
                    let mut da = vec![0.0; n * m];
                    for (r, &i) in idx.iter().enumerate() {
                        da[i * m..(i + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(x, y)| *x += y);
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::SegmentMean { a, seg, counts } => {
                    let (n, m) = self.dims(*a);
                    let mut da = vec![0.0; n * m];
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        da[r * m..(r + 1) * m].iter_mut().zip(&g[s * m..(s + 1) * m]).for_each(|(x, y)| *x = y * inv);
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::SegmentMax { a, argmax } => {
                    let (n, m) = self.dims(*a);
                    let mut da = vec![0.0; n * m];
                    for (slot, &r) in argmax.iter().enumerate() {
                        let c = slot % m;
                        da[r * m + c] += g[slot];
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::RowNorm(a) => {
                    let (n, m) = self.dims(*a);
                    let x = self.value(*a).data();
                    let norms = node.value.data();
                    let mut da = vec![0.0; n * m];
                    for r in 0..n {
                        if norms[r] > 0.0 {
                            for c in 0..m {
                                da[r * m + c] = g[r] * x[r * m + c] / norms[r];
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::Huber { a, delta } => {
                    let da = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(d, x)| d * huber_derivative(*x, *delta))
                        .collect();
                    accumulate(&mut grads, a.0, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, a.0, vec![g[0]; n]);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let (n, c) = self.dims(*logits);
                    let scale = g[0] / n.max(1) as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * c + t] -= scale;
                    }
                    accumulate(&mut grads, logits.0, dl);
                }
                Op::Focal { logits, targets, probs, gamma, alpha } => {
                    let (n, c) = self.dims(*logits);
                    let scale = g[0] / n.max(1) as f64;
                    let z = self.value(*logits).data();
                    let mut dl = vec![0.0; n * c];
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * c..(r + 1) * c];
                        let q = one_minus_pt(p, t);
                        let log_pt = -nll_row(&z[r * c..(r + 1) * c], t);
                        let pt = p[t];
                        // d/dz_k [-(1-p_t)^γ log p_t] = (dg/dp_t · p_t) (δ_tk − p_k)
                        let dgp = if *gamma == 0.0 {
                            -1.0
                        } else if q == 0.0 {
                            0.0
                        } else {
                            gamma * q.powf(gamma - 1.0) * pt * log_pt - q.powf(*gamma)
                        };
                        let w = focal_alpha(t, *alpha) * dgp * scale;
                        for k in 0..c {
                            let delta = if k == t { 1.0 } else { 0.0 };
                            dl[r * c + k] = w * (delta - p[k]);
                        }
                    }
                    accumulate(&mut grads, logits.0, dl);
                }
            }
        }

        for (pid, var) in &self.params {
            if let Some(g) = out.leaves.get(&var.0) {
                out.params.insert(*pid, g.clone());
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn check_targets(n: usize, c: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n {
        return shape_err(format!("{} targets for {n} rows", targets.len()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(DiffError::Invalid(format!("target class {t} outside 0..{c}")));
    }
    Ok(())
}

fn nll_row(z: &[f64], t: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    lse - z[t]
}

/// Softmax probabilities (row-major) and per-row negative log-likelihood.
fn softmax_nll(z: &[f64], c: usize, targets: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; z.len()];
    let mut nll = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        let row = &z[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (k, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            probs[r * c + k] = e;
            s += e;
        }
        probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= s);
        nll.push(s.ln() + m - row[t]);
    }
    (probs, nll)
}

/// `1 − p_t`, summed from the other classes to keep precision near saturation.
fn one_minus_pt(p: &[f64], t: usize) -> f64 {
    p.iter().enumerate().filter(|(k, _)| *k != t).map(|(_, v)| v).sum()
}

fn focal_alpha(target: usize, alpha: f64) -> f64 {
    if target == 0 {
        1.0 - alpha
    } else {
        alpha
    }
}

pub(crate) fn huber_value(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub(crate) fn huber_derivative(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}
