//! Replayable op tape. A forward pass records one node per primitive; the
//! backward pass walks the tape in reverse, accumulating gradients into
//! per-node slots in a fixed order. Re-running backward on the same tape
//! produces bit-identical gradients.
//!
//! Gradients are tracked for leaves explicitly marked `requires_grad` and for
//! anything computed from them. Nodes outside that cone are skipped during the
//! reverse sweep, which is what makes "only these blocks are trainable"
//! passes cheap.

use super::linalg;
use super::{invalid, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax penalty used for causal masking; large enough that
/// exp(x - max) underflows to exactly 0 for masked slots.
pub const NEG_MASK: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    EmbedLookup { table: Var, ids: Vec<u32> },
    RowSoftmax { x: Var },
    RowLogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu { x: Var },
    LogSigmoid { x: Var },
    CrossEntropyNll { logits: Var, targets: Vec<u32> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    RowSum { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Dot { a: Var, b: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list of recorded operations plus their forward values.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient slots produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(op, value, rg))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::MatmulNt { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Dot { a, b } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Scale { x, .. }
            | Op::RowSoftmax { x }
            | Op::RowLogSoftmax { x }
            | Op::Gelu { x }
            | Op::LogSigmoid { x }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::RowSum { x }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::CrossEntropyNll { logits, .. } => vec![*logits],
            Op::ConcatCols { parts } => parts.clone(),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(invalid(format!("{op}: expected matrix, got shape {other:?}"))),
        }
    }

    // ── arithmetic ───────────────────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        linalg::matmul_nn_acc(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
        );
        self.push("matmul", Op::Matmul { a, b }, out)
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]` — row-by-row dot products.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        linalg::matmul_nt_acc(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
        );
        self.push("matmul_nt", Op::MatmulNt { a, b }, out)
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(name, op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `[m,n] + [n]`, broadcast over rows — the only broadcast on the tape.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(b).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &add) in row.iter_mut().zip(&bv) {
                *o += add;
            }
        }
        self.push("add_bias", Op::AddBias { x, b }, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push("scale", Op::Scale { x, c }, out)
    }

    // ── lookups, slices ──────────────────────────────────────────────────

    /// Gather rows of `table` (`[V,d]`) by token id → `[ids.len(), d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table, "embed_lookup")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "embed_lookup",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        self.push(
            "embed_lookup",
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(&[len, n], data)?;
        self.push("slice_rows", Op::SliceRows { x, start, len }, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_vec(&[m, len], data)?;
        self.push("slice_cols", Op::SliceCols { x, start, len }, out)
    }

    /// Column-wise concat of same-height matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(invalid("concat_cols: empty part list"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![mp],
                });
            }
            widths.push(np);
            total += np;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[m, total], data)?;
        self.push(
            "concat_cols",
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        )
    }

    // ── nonlinearities ───────────────────────────────────────────────────

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(x, "row_softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push("row_softmax", Op::RowSoftmax { x }, out)
    }

    /// Row-wise log-softmax: `x - logsumexp(row)`.
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(x, "row_log_softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let lse = super::logsumexp(row)?;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("row_log_softmax", Op::RowLogSoftmax { x }, out)
    }

    /// Row-wise layer norm with learned gain/bias (`[n]` each), eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![n],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        self.push("layer_norm", Op::LayerNorm { x, gain, bias }, out)
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu_fwd(*v);
        }
        self.push("gelu", Op::Gelu { x }, out)
    }

    /// Numerically stable elementwise log σ(x).
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = log_sigmoid_fwd(*v);
        }
        self.push("log_sigmoid", Op::LogSigmoid { x }, out)
    }

    // ── losses and reductions ────────────────────────────────────────────

    /// Per-row negative log-likelihood of `targets` under `logits` (`[R,V]`),
    /// returned as a `[R]` vector. Row r must predict `targets[r]`.
    pub fn cross_entropy_nll(&mut self, logits: Var, targets: &[u32]) -> Result<Var, TensorError> {
        let (r, v) = self.dims2(logits, "cross_entropy_nll")?;
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_nll",
                lhs: vec![r],
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(logits).data();
        let mut data = Vec::with_capacity(r);
        for (i, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy_nll",
                    index: t,
                    len: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            data.push(super::logsumexp(row)? - row[t]);
        }
        let out = Tensor::from_vec(&[r], data)?;
        self.push(
            "cross_entropy_nll",
            Op::CrossEntropyNll {
                logits,
                targets: targets.to_vec(),
            },
            out,
        )
    }

    /// `[m,n] → [m]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "row_sum")?;
        let src = self.value(x).data();
        let data: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let out = Tensor::from_vec(&[m], data)?;
        self.push("row_sum", Op::RowSum { x }, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean of empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        self.push("mean", Op::Mean { x }, Tensor::scalar(s / n as f64))
    }

    /// Scalar dot product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let s = super::dot(self.value(a).data(), self.value(b).data());
        self.push("dot", Op::Dot { a, b }, Tensor::scalar(s))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node. The seed gradient is 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::from_vec(
            self.value(loss).shape(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backward_node(i, &g, &mut slots)?;
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accum(&self, slots: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut slots[v.0];
        match slot {
            Some(t) => {
                for (o, d) in t.data_mut().iter_mut().zip(delta) {
                    *o += d;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.nodes[v.0].value.shape());
                for (o, d) in t.data_mut().iter_mut().zip(delta) {
                    *o += d;
                }
                *slot = Some(t);
            }
        }
    }

    /// Like `accum` but lets the closure write into a scratch buffer first.
    fn accum_with(
        &self,
        slots: &mut [Option<Tensor>],
        v: Var,
        fill: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut scratch = vec![0.0; self.nodes[v.0].value.numel()];
        fill(&mut scratch);
        self.accum(slots, v, &scratch);
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        slots: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                // dA = g · Bᵀ ; dB = Aᵀ · g
                self.accum_with(slots, a, |da| {
                    linalg::matmul_nt_acc(da, g.data(), self.value(b).data(), m, n, k);
                });
                self.accum_with(slots, b, |db| {
                    linalg::matmul_tn_acc(db, self.value(a).data(), g.data(), m, k, n);
                });
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                // out = A·Bᵀ : dA = g·B ; dB = gᵀ·A
                self.accum_with(slots, a, |da| {
                    linalg::matmul_nn_acc(da, g.data(), self.value(b).data(), m, n, k);
                });
                self.accum_with(slots, b, |db| {
                    linalg::matmul_tn_acc(db, g.data(), self.value(a).data(), m, n, k);
                });
            }
            Op::Add { a, b } => {
                self.accum(slots, a, g.data());
                self.accum(slots, b, g.data());
            }
            Op::Sub { a, b } => {
                self.accum(slots, a, g.data());
                self.accum_with(slots, b, |db| {
                    for (o, gv) in db.iter_mut().zip(g.data()) {
                        *o = -gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accum_with(slots, a, |da| {
                    for ((o, gv), bv) in da.iter_mut().zip(g.data()).zip(self.value(b).data()) {
                        *o = gv * bv;
                    }
                });
                self.accum_with(slots, b, |db| {
                    for ((o, gv), av) in db.iter_mut().zip(g.data()).zip(self.value(a).data()) {
                        *o = gv * av;
                    }
                });
            }
            Op::AddBias { x, b } => {
                self.accum(slots, x, g.data());
                let n = self.value(b).numel();
                self.accum_with(slots, b, |db| {
                    for row in g.data().chunks(n) {
                        for (o, gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accum_with(slots, x, |dx| {
                    for (o, gv) in dx.iter_mut().zip(g.data()) {
                        *o = gv * c;
                    }
                });
            }
            Op::EmbedLookup { table, ids } => {
                let d = self.value(table).cols();
                self.accum_with(slots, table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (o, gv) in dst.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::RowSoftmax { x } => {
                let n = self.value(x).cols();
                let y = self.nodes[i].value.data();
                self.accum_with(slots, x, |dx| {
                    for (r, (dx_row, g_row)) in
                        dx.chunks_mut(n).zip(g.data().chunks(n)).enumerate()
                    {
                        let y_row = &y[r * n..(r + 1) * n];
                        let inner = super::dot(g_row, y_row);
                        for ((o, &gv), &yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o = yv * (gv - inner);
                        }
                    }
                });
            }
            Op::RowLogSoftmax { x } => {
                let n = self.value(x).cols();
                let y = self.nodes[i].value.data();
                self.accum_with(slots, x, |dx| {
                    for (r, (dx_row, g_row)) in
                        dx.chunks_mut(n).zip(g.data().chunks(n)).enumerate()
                    {
                        let y_row = &y[r * n..(r + 1) * n];
                        let gsum: f64 = g_row.iter().sum();
                        for ((o, &gv), &yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = self.value(x).cols();
                let xs = self.value(x).data();
                let gn = self.value(gain).data();
                let rows = self.value(x).rows();
                // Recompute per-row stats; cheap and keeps the tape lean.
                let mut xhat = vec![0.0; rows * n];
                let mut rstds = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xs[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + LN_EPS).sqrt();
                    rstds[r] = rstd;
                    for (j, v) in row.iter().enumerate() {
                        xhat[r * n + j] = (v - mean) * rstd;
                    }
                }
                self.accum_with(slots, x, |dx| {
                    for r in 0..rows {
                        let g_row = &g.data()[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = g_row[j] * gn[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let dxh = g_row[j] * gn[j];
                            dx[r * n + j] =
                                rstds[r] * (dxh - inv_n * sum_dxh - xh[j] * inv_n * sum_dxh_xh);
                        }
                    }
                });
                self.accum_with(slots, gain, |dg| {
                    for r in 0..rows {
                        let g_row = &g.data()[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dg[j] += g_row[j] * xh[j];
                        }
                    }
                });
                self.accum_with(slots, bias, |db| {
                    for row in g.data().chunks(n) {
                        for (o, gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xs = self.value(x).data();
                self.accum_with(slots, x, |dx| {
                    for ((o, &gv), &xv) in dx.iter_mut().zip(g.data()).zip(xs) {
                        *o = gv * gelu_grad(xv);
                    }
                });
            }
            Op::LogSigmoid { x } => {
                let xs = self.value(x).data();
                self.accum_with(slots, x, |dx| {
                    for ((o, &gv), &xv) in dx.iter_mut().zip(g.data()).zip(xs) {
                        // d/dx log σ(x) = σ(-x)
                        *o = gv * sigmoid(-xv);
                    }
                });
            }
            Op::CrossEntropyNll { logits, targets } => {
                let v = self.value(logits).cols();
                let src = self.value(logits).data();
                self.accum_with(slots, logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gv = g.data()[r];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &src[r * v..(r + 1) * v];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                        let dst = &mut dl[r * v..(r + 1) * v];
                        for (j, o) in dst.iter_mut().enumerate() {
                            let p = (row[j] - mx).exp() / z;
                            *o += gv * p;
                        }
                        dst[t as usize] -= gv;
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let n = self.value(x).cols();
                debug_assert_eq!(g.data().len(), len * n);
                self.accum_with(slots, x, |dx| {
                    let dst = &mut dx[start * n..(start + len) * n];
                    for (o, gv) in dst.iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = self.value(x).cols();
                let m = self.value(x).rows();
                self.accum_with(slots, x, |dx| {
                    for r in 0..m {
                        let src = &g.data()[r * len..(r + 1) * len];
                        let dst = &mut dx[r * n + start..r * n + start + len];
                        for (o, gv) in dst.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0usize;
                for &p in &parts {
                    let w = self.value(p).cols();
                    self.accum_with(slots, p, |dp| {
                        for r in 0..m {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            let dst = &mut dp[r * w..(r + 1) * w];
                            for (o, gv) in dst.iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::RowSum { x } => {
                let n = self.value(x).cols();
                self.accum_with(slots, x, |dx| {
                    for (row, &gv) in dx.chunks_mut(n).zip(g.data()) {
                        for o in row {
                            *o = gv;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accum_with(slots, x, |dx| {
                    for o in dx {
                        *o = gv;
                    }
                });
            }
            Op::Mean { x } => {
                let gv = g.data()[0] / self.value(x).numel() as f64;
                self.accum_with(slots, x, |dx| {
                    for o in dx {
                        *o = gv;
                    }
                });
            }
            Op::Dot { a, b } => {
                let gv = g.data()[0];
                self.accum_with(slots, a, |da| {
                    for (o, &bv) in da.iter_mut().zip(self.value(b).data()) {
                        *o = gv * bv;
                    }
                });
                self.accum_with(slots, b, |db| {
                    for (o, &av) in db.iter_mut().zip(self.value(a).data()) {
                        *o = gv * av;
                    }
                });
            }
        }
        Ok(())
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

fn log_sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(
                Tensor::from_vec(&[2, 4], vec![0.1, -3.0, 2.5, 0.0, 10.0, 10.0, 10.0, 10.0])
                    .unwrap(),
                false,
            );
        let y = tape.row_softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn log_softmax_plus_lse_reconstructs_logits() {
        let mut tape = Tape::new();
        let vals = vec![0.3, -1.0, 4.0, 2.0, 0.0, -0.5];
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vals.clone()).unwrap(), false);
        let y = tape.row_log_softmax(x).unwrap();
        for r in 0..2 {
            let row = &vals[r * 3..(r + 1) * 3];
            let lse = crate::tensor::logsumexp(row).unwrap();
            for j in 0..3 {
                let rebuilt = tape.value(y).data()[r * 3 + j] + lse;
                assert!((rebuilt - row[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_slots_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[1, 3], vec![1.0, 2.0 + NEG_MASK, 0.5 + NEG_MASK]).unwrap(),
            false,
        );
        let y = tape.row_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_outputs_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1], vec![1e308]).unwrap(), false);
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn backward_is_deterministic_bit_for_bit() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::from_vec(&[2, 3], vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4]).unwrap(),
            true,
        );
        let b = tape.leaf(
            Tensor::from_vec(&[3, 2], vec![1.0, 0.5, -0.3, 0.8, 0.2, -1.2]).unwrap(),
            true,
        );
        let c = tape.matmul(a, b).unwrap();
        let s = tape.mean(c).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(a).unwrap().data(), g2.get(a).unwrap().data());
        assert_eq!(g1.get(b).unwrap().data(), g2.get(b).unwrap().data());
    }

    #[test]
    fn no_grad_for_untracked_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(), false);
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
    }
}
