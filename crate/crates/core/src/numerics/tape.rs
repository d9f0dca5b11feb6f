// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive call appends one entry to the tape and returns a [`Var`]
//! handle to its output slot. [`Tape::backward`] walks the entries in exact
//! reverse order of recording and accumulates gradients additively into each
//! input slot. A tape is consumed by its backward pass; build a new one for
//! every forward pass.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one value slot on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f32> },
    FrozenLayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Sum(Var),
    RowSqNorm(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f32>, probs: Tensor },
}

struct Entry {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every slot of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; slots with no path to the root get exact zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Whether any gradient reached `v`.
    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A differentiable input slot.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.entries.push(Entry {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.entries.len() - 1)
    }

    /// A slot that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.entries.push(Entry {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.entries[v.0].needs_grad)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        value.check_finite(name)?;
        let needs_grad = self.needs(inputs);
        self.entries.push(Entry { value, op, needs_grad });
        Ok(Var(self.entries.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · b^T` for 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = kernels::bmm(self.value(a), self.value(b), trans_b)?;
        self.push("bmm", out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_row(&self, name: &'static str, a: Var, row: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims2();
        if tr.numel() != c {
            return Err(Error::shape(name, format!("{:?} with row {:?}", ta.shape(), tr.shape())));
        }
        let mut out = ta.clone();
        for i in 0..r {
            for (o, &v) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o = f(*o, v);
            }
        }
        Ok(out)
    }

    /// Adds a `[c]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("add_row", a, row, |x, y| x + y)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `[c]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row("mul_row", a, row, |x, y| x * y)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (r, _) = ta.dims2();
        if tc.numel() != r {
            return Err(Error::shape("mul_col", format!("{:?} with col {:?}", ta.shape(), tc.shape())));
        }
        let mut out = ta.clone();
        for i in 0..r {
            let s = tc.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.push("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, kernels::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f32::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// Causal softmax over the last two dims of a `[g, t, t]` score tensor.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let out = kernels::causal_softmax(self.value(scores))?;
        self.push("causal_softmax", out, Op::CausalSoftmax(scores), &[scores])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data())?;
        self.push("layer_norm", y, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// Layer norm whose per-row reciprocal standard deviations are supplied
    /// and treated as constants; only the centring stays input-dependent.
    pub fn frozen_layer_norm(&mut self, x: Var, gain: Var, bias: Var, rstd: Vec<f32>) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = tx.dims2();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if rstd.len() != r || g.len() != d || b.len() != d {
            return Err(Error::shape("frozen_layer_norm", format!("{:?}", tx.shape())));
        }
        let mut xhat = tx.clone();
        let mut y = tx.clone();
        for i in 0..r {
            let mean = tx.row(i).iter().sum::<f32>() / d as f32;
            for j in 0..d {
                let h = (tx.row(i)[j] - mean) * rstd[i];
                xhat.row_mut(i)[j] = h;
                y.row_mut(i)[j] = h * g[j] + b[j];
            }
        }
        self.push(
            "frozen_layer_norm",
            y,
            Op::FrozenLayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!("embedding id {bad} >= {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = kernels::split_heads(self.value(x), batch, seq, heads)?;
        self.push("split_heads", out, Op::SplitHeads { x, batch, seq, heads }, &[x])
    }

    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = kernels::merge_heads(self.value(x), batch, seq, heads)?;
        self.push("merge_heads", out, Op::MergeHeads { x, batch, seq, heads }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum_f64() as f32);
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Squared L2 norm of every row: `[r, c] -> [r]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, _) = t.dims2();
        let data = (0..r)
            .map(|i| t.row(i).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() as f32)
            .collect();
        self.push("row_sq_norm", Tensor::from_parts(vec![r], data), Op::RowSqNorm(a), &[a])
    }

    /// Weighted mean token cross-entropy; a zero weight masks a row out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), targets, weights)?;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar root. Consumes the tape's recording.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.entries.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            if !self.entries[idx].needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let shapes = self.entries.iter().map(|e| e.value.shape().to_vec()).collect();
        // Constants never carry gradient.
        for (g, e) in grads.iter_mut().zip(&self.entries) {
            if !e.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.entries[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let entry = &self.entries[idx];
        let val = |v: Var| &self.entries[v.0].value;
        let like = |v: Var, data: Vec<f32>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let wants = |v: Var| self.entries[v.0].needs_grad;
        match &entry.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let da = kernels::matmul_nt(dy, val(*b))?;
                    self.accumulate(grads, *a, da.reshape(val(*a).shape())?);
                }
                if wants(*b) {
                    let (m, k) = val(*a).dims2();
                    let a2 = Tensor::from_parts(vec![m, k], val(*a).data().to_vec());
                    let (_, n) = dy.dims2();
                    let dy2 = Tensor::from_parts(vec![m, n], dy.data().to_vec());
                    self.accumulate(grads, *b, kernels::matmul_tn(&a2, &dy2)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul(dy, val(*b))?);
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(dy, val(*a))?);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                if *trans_b {
                    // c = a b^T: da = dc b, db = dc^T a
                    if wants(*a) {
                        self.accumulate(grads, *a, kernels::bmm(dy, val(*b), false)?);
                    }
                    if wants(*b) {
                        self.accumulate(grads, *b, kernels::bmm_tn(dy, val(*a))?);
                    }
                } else {
                    // c = a b: da = dc b^T, db = a^T dc
                    if wants(*a) {
                        self.accumulate(grads, *a, kernels::bmm(dy, val(*b), true)?);
                    }
                    if wants(*b) {
                        self.accumulate(grads, *b, kernels::bmm_tn(val(*a), dy)?);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, like(*b, dy.data().iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = dy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = dy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, like(*a, da));
                self.accumulate(grads, *b, like(*b, db));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                if wants(*row) {
                    let (r, c) = dy.dims2();
                    let mut dr = vec![0.0f32; c];
                    for i in 0..r {
                        dr.iter_mut().zip(dy.row(i)).for_each(|(s, g)| *s += g);
                    }
                    self.accumulate(grads, *row, like(*row, dr));
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let (r, c) = dy.dims2();
                let mut da = dy.clone();
                let mut dr = vec![0.0f32; c];
                for i in 0..r {
                    for j in 0..c {
                        dr[j] += dy.row(i)[j] * ta.row(i)[j];
                        da.row_mut(i)[j] *= tr.data()[j];
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *row, like(*row, dr));
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let (r, _) = dy.dims2();
                let mut da = dy.clone();
                let mut dc = vec![0.0f32; r];
                for i in 0..r {
                    dc[i] = dy.row(i).iter().zip(ta.row(i)).map(|(g, x)| g * x).sum();
                    let s = tc.data()[i];
                    da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *col, like(*col, dc));
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, like(*a, dy.data().iter().map(|g| g * s).collect()));
            }
            Op::Relu(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Gelu(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = dy.data().iter().zip(entry.value.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::CausalSoftmax(s) => {
                let p = &entry.value;
                let t = p.shape()[2];
                let mut d = vec![0.0f32; p.numel()];
                for (row, (prow, grow)) in d
                    .chunks_mut(t)
                    .zip(p.data().chunks(t).zip(dy.data().chunks(t)))
                {
                    let dot: f32 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        row[j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *s, like(*s, d));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                self.layer_norm_backward(dy, *x, *gain, *bias, xhat, rstd, true, grads);
            }
            Op::FrozenLayerNorm { x, gain, bias, xhat, rstd } => {
                self.layer_norm_backward(dy, *x, *gain, *bias, xhat, rstd, false, grads);
            }
            Op::Embedding { table, ids } => {
                let (_, d) = dy.dims2();
                let mut dt = Tensor::zeros(val(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[i * d..(i + 1) * d];
                    dt.row_mut(id).iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                self.accumulate(grads, *x, kernels::merge_heads(dy, *batch, *seq, *heads)?);
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                self.accumulate(grads, *x, kernels::split_heads(dy, *batch, *seq, *heads)?);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), dy.item()));
            }
            Op::RowSqNorm(a) => {
                let ta = val(*a);
                let (r, _) = ta.dims2();
                let mut da = ta.clone();
                for i in 0..r {
                    let g = 2.0 * dy.data()[i];
                    da.row_mut(i).iter_mut().for_each(|v| *v *= g);
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let total: f64 = weights.iter().map(|&w| w as f64).sum();
                let mut d = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let s = (w as f64 / total) as f32 * dy.item();
                    let row = d.row_mut(i);
                    if w == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        dy: &Tensor,
        x: Var,
        gain: Var,
        bias: Var,
        xhat: &Tensor,
        rstd: &[f32],
        through_std: bool,
        grads: &mut [Option<Tensor>],
    ) {
        let g = self.entries[gain.0].value.data();
        let (r, d) = dy.dims2();
        let mut dx = Tensor::zeros(self.entries[x.0].value.shape());
        let mut dg = vec![0.0f32; d];
        let mut db = vec![0.0f32; d];
        let mut dxhat = vec![0.0f32; d];
        for i in 0..r {
            let gy = dy.row(i);
            let xh = xhat.row(i);
            for j in 0..d {
                dg[j] += gy[j] * xh[j];
                db[j] += gy[j];
                dxhat[j] = gy[j] * g[j];
            }
            let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
            let mean_dxhat_xhat = if through_std {
                dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32
            } else {
                0.0
            };
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        self.accumulate(grads, x, dx);
        self.accumulate(grads, gain, Tensor::from_parts(vec![d], dg));
        self.accumulate(grads, bias, Tensor::from_parts(vec![d], db));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = kernels::softmax_rows(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_forward_and_gate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn identity_matmul_is_a_no_op() {
        let a = Tensor::from_fn(&[3, 3], |i| (i as f32 * 0.37).sin());
        let out = kernels::matmul(&Tensor::identity(3), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(4.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 4.0);
        assert_eq!(g.get(y).item(), 3.0);
    }

    #[test]
    fn unreachable_slots_get_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
        let dangling = tape.exp(unused).unwrap();
        let root = tape.sum(x).unwrap();
        let g = tape.backward(root).unwrap();
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
        assert!(g.get(dangling).data().iter().all(|&v| v == 0.0));
        assert!(!g.touched(unused));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let big = tape.leaf(Tensor::from_vec(vec![100.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_rows_are_centred() {
        let x = Tensor::from_fn(&[4, 8], |i| ((i * 7) % 5) as f32 - 1.3);
        let (_, xhat, _) = kernels::layer_norm(&x, &[1.0; 8], &[0.0; 8]).unwrap();
        for r in 0..4 {
            let mean: f32 = xhat.row(r).iter().sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask() {
        let s = Tensor::from_fn(&[2, 4, 4], |i| (i as f32 * 0.91).cos() * 3.0);
        let p = kernels::causal_softmax(&s).unwrap();
        for g in 0..2 {
            for i in 0..4 {
                let row = &p.data()[(g * 4 + i) * 4..(g * 4 + i + 1) * 4];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
