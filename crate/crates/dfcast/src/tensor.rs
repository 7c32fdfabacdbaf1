//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns all tensors as flat row-major buffers and records every
//! operation on a Wengert tape. Calling [`Graph::backward`] on a scalar loss
//! replays the tape in reverse and returns gradients for every tensor that
//! requires them. A tape is consumed by at most one backward pass; between
//! optimization steps [`Graph::clear_tape`] drops activations while keeping
//! parameters in place.
//!
//! Element type is generic over [`Real`]: training defaults to `f32`,
//! gradient-check tests run `f64`.

use std::fmt;

use crate::error::{DfError, Result};

/// Floating-point element of a tensor.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation. Saved fields are whatever the backward rule
/// needs beyond the input/output buffers themselves.
#[derive(Debug, Clone)]
enum Op<E: Real> {
    Matmul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    Transpose { x: TensorId, out: TensorId, rows: usize, cols: usize },
    Reshape { x: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Div { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, factor: E, out: TensorId },
    AddScalar { x: TensorId, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    Exp { x: TensorId, out: TensorId },
    Ln { x: TensorId, out: TensorId },
    Sqrt { x: TensorId, out: TensorId },
    Clamp { x: TensorId, lo: E, hi: E, out: TensorId },
    /// Broadcast-add a length-`cols` vector to every row of a matrix.
    AddRow { x: TensorId, v: TensorId, out: TensorId, rows: usize, cols: usize },
    /// Broadcast-multiply every row of a matrix by a length-`cols` vector.
    MulRow { x: TensorId, v: TensorId, out: TensorId, rows: usize, cols: usize },
    /// Multiply row r by the constant `factors[r]` (non-differentiable mask).
    ScaleRows { x: TensorId, factors: Vec<E>, out: TensorId, cols: usize },
    SoftmaxRows { x: TensorId, out: TensorId, rows: usize, cols: usize },
    /// Softmax over key positions where `key_mask` is true; masked positions
    /// get exactly zero weight. A row with no unmasked key yields zeros.
    MaskedSoftmaxRows { x: TensorId, key_mask: Vec<bool>, out: TensorId, rows: usize, cols: usize },
    LogSumExpRows { x: TensorId, out: TensorId, rows: usize, cols: usize },
    /// Per-row standardization, no affine parameters.
    LayerNormRows { x: TensorId, out: TensorId, rows: usize, cols: usize, eps: E },
    /// Per-column standardization over the row (batch) dimension.
    BatchNormCols { x: TensorId, out: TensorId, rows: usize, cols: usize, eps: E },
    SumAll { x: TensorId, out: TensorId },
    MeanAll { x: TensorId, out: TensorId },
    ConcatRows { inputs: Vec<TensorId>, out: TensorId, cols: usize, row_counts: Vec<usize> },
    ConcatCols { inputs: Vec<TensorId>, out: TensorId, rows: usize, col_counts: Vec<usize> },
    SliceRows { x: TensorId, out: TensorId, start: usize, rows: usize, cols: usize },
    SliceCols { x: TensorId, out: TensorId, start: usize, cols: usize, total_cols: usize, rows: usize },
    /// Row gather from a table (embedding lookup); backward scatter-adds.
    GatherRows { table: TensorId, indices: Vec<usize>, out: TensorId, cols: usize },
    /// Flat-index gather; backward scatter-adds.
    GatherFlat { x: TensorId, indices: Vec<usize>, out: TensorId },
    Dropout { x: TensorId, keep: Vec<bool>, scale: E, out: TensorId },
}

/// Gradients produced by one backward pass, indexed by [`TensorId`].
pub struct Gradients<E: Real> {
    slots: Vec<Option<Vec<E>>>,
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Euclidean norm over the listed tensors' gradients (missing = zero).
    pub fn global_norm(&self, ids: &[TensorId]) -> f64 {
        let mut acc = 0.0;
        for id in ids {
            if let Some(g) = self.get(*id) {
                for v in g {
                    let f = v.to_f64_();
                    acc += f * f;
                }
            }
        }
        acc.sqrt()
    }
}

/// Tensor arena plus operation tape.
pub struct Graph<E: Real> {
    values: Vec<Vec<E>>,
    shapes: Vec<Vec<usize>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op<E>>,
    param_watermark: Option<usize>,
    consumed: bool,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            shapes: Vec::new(),
            needs_grad: Vec::new(),
            ops: Vec::new(),
            param_watermark: None,
            consumed: false,
        }
    }

    fn push_node(&mut self, values: Vec<E>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let id = TensorId(self.values.len());
        self.values.push(values);
        self.shapes.push(shape);
        self.needs_grad.push(needs_grad);
        id
    }

    /// Register a trainable parameter. Parameters must be created before
    /// [`Graph::freeze_params`]; they survive [`Graph::clear_tape`].
    pub fn param(&mut self, values: Vec<E>, shape: Vec<usize>) -> TensorId {
        assert!(
            self.param_watermark.is_none(),
            "parameters must be registered before freeze_params"
        );
        self.push_node(values, shape, true)
    }

    /// Seal the parameter set. Everything allocated afterwards is an
    /// activation and is dropped by [`Graph::clear_tape`].
    pub fn freeze_params(&mut self) {
        self.param_watermark = Some(self.values.len());
    }

    /// Non-trainable input tensor.
    pub fn leaf(&mut self, values: Vec<E>, shape: Vec<usize>) -> TensorId {
        self.push_node(values, shape, false)
    }

    /// Input tensor that should receive a gradient (attribution paths).
    pub fn input(&mut self, values: Vec<E>, shape: Vec<usize>) -> TensorId {
        self.push_node(values, shape, true)
    }

    pub fn value(&self, id: TensorId) -> &[E] {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.values[id.0].len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.needs_grad[id.0]
    }

    /// Overwrite a tensor's values in place (optimizer steps, checkpoint load).
    pub fn set_value(&mut self, id: TensorId, values: &[E]) {
        assert_eq!(values.len(), self.values[id.0].len(), "set_value length mismatch");
        self.values[id.0].copy_from_slice(values);
    }

    /// Apply an in-place update to a tensor's values.
    pub fn update_value(&mut self, id: TensorId, f: impl FnOnce(&mut [E])) {
        f(&mut self.values[id.0]);
    }

    /// Drop all activations and the tape; parameters stay.
    pub fn clear_tape(&mut self) {
        let keep = self
            .param_watermark
            .expect("clear_tape requires freeze_params");
        self.values.truncate(keep);
        self.shapes.truncate(keep);
        self.needs_grad.truncate(keep);
        self.ops.clear();
        self.consumed = false;
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn check_finite(&self, id: TensorId, op: &str) -> Result<()> {
        if self.values[id.0].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DfError::Numeric(format!(
                "non-finite value produced by {op} (shape {:?})",
                self.shapes[id.0]
            )))
        }
    }

    fn dims2(&self, id: TensorId, op: &str) -> Result<(usize, usize)> {
        match self.shapes[id.0].as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(DfError::Shape(format!("{op}: expected 2-d tensor, got {s:?}"))),
        }
    }

    // ── op builders ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(DfError::Shape(format!(
                "matmul: inner dimensions disagree ({m}x{k} . {k2}x{n})"
            )));
        }
        let mut out = vec![E::zero(); m * n];
        matmul_nn(&self.values[a.0], &self.values[b.0], &mut out, m, k, n);
        let grad = self.needs_grad[a.0] || self.needs_grad[b.0];
        let id = self.push_node(out, vec![m, n], grad);
        self.check_finite(id, "matmul")?;
        if grad {
            self.ops.push(Op::Matmul { a, b, out: id, m, k, n });
        }
        Ok(id)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xs = &self.values[x.0];
        let mut out = vec![E::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xs[i * cols + j];
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![cols, rows], grad);
        if grad {
            self.ops.push(Op::Transpose { x, out: id, rows, cols });
        }
        Ok(id)
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x.0].len() {
            return Err(DfError::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shapes[x.0], shape
            )));
        }
        let grad = self.needs_grad[x.0];
        let vals = self.values[x.0].clone();
        let id = self.push_node(vals, shape, grad);
        if grad {
            self.ops.push(Op::Reshape { x, out: id });
        }
        Ok(id)
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(E, E) -> E,
        rec: impl FnOnce(TensorId) -> Op<E>,
    ) -> Result<TensorId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(DfError::Shape(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        let out: Vec<E> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let grad = self.needs_grad[a.0] || self.needs_grad[b.0];
        let shape = self.shapes[a.0].clone();
        let id = self.push_node(out, shape, grad);
        self.check_finite(id, name)?;
        if grad {
            self.ops.push(rec(id));
        }
        Ok(id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, |out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, |out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, |out| Op::Mul { a, b, out })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, |out| Op::Div { a, b, out })
    }

    fn unary(
        &mut self,
        x: TensorId,
        name: &str,
        f: impl Fn(E) -> E,
        rec: impl FnOnce(TensorId) -> Op<E>,
    ) -> Result<TensorId> {
        let out: Vec<E> = self.values[x.0].iter().map(|&v| f(v)).collect();
        let grad = self.needs_grad[x.0];
        let shape = self.shapes[x.0].clone();
        let id = self.push_node(out, shape, grad);
        self.check_finite(id, name)?;
        if grad {
            self.ops.push(rec(id));
        }
        Ok(id)
    }

    pub fn scale(&mut self, x: TensorId, factor: E) -> Result<TensorId> {
        self.unary(x, "scale", |v| v * factor, |out| Op::Scale { x, factor, out })
    }

    pub fn add_scalar(&mut self, x: TensorId, value: E) -> Result<TensorId> {
        self.unary(x, "add_scalar", |v| v + value, |out| Op::AddScalar { x, out })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "relu", |v| if v > E::zero() { v } else { E::zero() }, |out| {
            Op::Relu { x, out }
        })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(
            x,
            "sigmoid",
            |v| {
                // Split on sign for stability at large |v|.
                if v >= E::zero() {
                    E::one() / (E::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (E::one() + e)
                }
            },
            |out| Op::Sigmoid { x, out },
        )
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "tanh", |v| v.tanh(), |out| Op::Tanh { x, out })
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "exp", |v| v.exp(), |out| Op::Exp { x, out })
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "ln", |v| v.ln(), |out| Op::Ln { x, out })
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(x, "sqrt", |v| v.sqrt(), |out| Op::Sqrt { x, out })
    }

    pub fn clamp(&mut self, x: TensorId, lo: E, hi: E) -> Result<TensorId> {
        self.unary(
            x,
            "clamp",
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            |out| Op::Clamp { x, lo, hi, out },
        )
    }

    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "add_row")?;
        if self.numel(v) != cols {
            return Err(DfError::Shape(format!(
                "add_row: vector length {} != cols {cols}",
                self.numel(v)
            )));
        }
        let mut out = self.values[x.0].clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] + self.values[v.0][c];
            }
        }
        let grad = self.needs_grad[x.0] || self.needs_grad[v.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "add_row")?;
        if grad {
            self.ops.push(Op::AddRow { x, v, out: id, rows, cols });
        }
        Ok(id)
    }

    pub fn mul_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "mul_row")?;
        if self.numel(v) != cols {
            return Err(DfError::Shape(format!(
                "mul_row: vector length {} != cols {cols}",
                self.numel(v)
            )));
        }
        let mut out = self.values[x.0].clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] * self.values[v.0][c];
            }
        }
        let grad = self.needs_grad[x.0] || self.needs_grad[v.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "mul_row")?;
        if grad {
            self.ops.push(Op::MulRow { x, v, out: id, rows, cols });
        }
        Ok(id)
    }

    /// Multiply each row by a constant factor (used for pad masking; the
    /// factors are data, not differentiated).
    pub fn scale_rows(&mut self, x: TensorId, factors: &[E]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "scale_rows")?;
        if factors.len() != rows {
            return Err(DfError::Shape(format!(
                "scale_rows: {} factors for {rows} rows",
                factors.len()
            )));
        }
        let mut out = self.values[x.0].clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] * factors[r];
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        if grad {
            self.ops.push(Op::ScaleRows { x, factors: factors.to_vec(), out: id, cols });
        }
        Ok(id)
    }

    /// Numerically stabilized softmax along each row.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let xs = &self.values[x.0];
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[r * cols + j] = out[r * cols + j] / denom;
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "softmax_rows")?;
        if grad {
            self.ops.push(Op::SoftmaxRows { x, out: id, rows, cols });
        }
        Ok(id)
    }

    /// Softmax along each row restricted to unmasked key positions. Masked
    /// positions get exactly zero weight; a row whose keys are all masked
    /// yields an all-zero row.
    pub fn masked_softmax_rows(&mut self, x: TensorId, key_mask: &[bool]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "masked_softmax_rows")?;
        if key_mask.len() != cols {
            return Err(DfError::Shape(format!(
                "masked_softmax_rows: mask length {} != cols {cols}",
                key_mask.len()
            )));
        }
        let xs = &self.values[x.0];
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mut max = E::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if key_mask[j] && v > max {
                    max = v;
                }
            }
            if !max.is_finite() {
                continue; // no attendable key: all-zero row
            }
            let mut denom = E::zero();
            for (j, &v) in row.iter().enumerate() {
                if key_mask[j] {
                    let e = (v - max).exp();
                    out[r * cols + j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                out[r * cols + j] = out[r * cols + j] / denom;
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "masked_softmax_rows")?;
        if grad {
            self.ops.push(Op::MaskedSoftmaxRows {
                x,
                key_mask: key_mask.to_vec(),
                out: id,
                rows,
                cols,
            });
        }
        Ok(id)
    }

    /// Stable log(sum(exp(row))) per row; output shape `[rows]`.
    pub fn logsumexp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "logsumexp_rows")?;
        let xs = &self.values[x.0];
        let mut out = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let sum: E = row.iter().map(|&v| (v - max).exp()).sum();
            out[r] = max + sum.ln();
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows], grad);
        self.check_finite(id, "logsumexp_rows")?;
        if grad {
            self.ops.push(Op::LogSumExpRows { x, out: id, rows, cols });
        }
        Ok(id)
    }

    /// Per-row standardization to zero mean and unit variance (before any
    /// affine transform, which callers apply via `mul_row`/`add_row`).
    pub fn layer_norm_rows(&mut self, x: TensorId, eps: E) -> Result<TensorId> {
        let (rows, cols) = self.dims2(x, "layer_norm_rows")?;
        if cols < 2 {
            return Err(DfError::Shape(format!(
                "layer_norm_rows: need at least 2 features, got {cols}"
            )));
        }
        let xs = &self.values[x.0];
        let mut out = vec![E::zero(); rows * cols];
        let n = E::from_f64(cols as f64);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().cloned().sum::<E>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
            let inv = E::one() / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv;
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "layer_norm_rows")?;
        if grad {
            self.ops.push(Op::LayerNormRows { x, out: id, rows, cols, eps });
        }
        Ok(id)
    }

    /// Per-column standardization over the batch (row) dimension. Returns
    /// the normalized tensor plus the batch mean and biased variance per
    /// column, which the batch-norm layer folds into its running statistics.
    pub fn batch_norm_cols(&mut self, x: TensorId, eps: E) -> Result<(TensorId, Vec<E>, Vec<E>)> {
        let (rows, cols) = self.dims2(x, "batch_norm_cols")?;
        if rows < 2 {
            return Err(DfError::Numeric(
                "batch_norm_cols: training-mode batch must have at least 2 rows".into(),
            ));
        }
        let xs = &self.values[x.0];
        let n = E::from_f64(rows as f64);
        let mut mean = vec![E::zero(); cols];
        let mut var = vec![E::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += xs[r * cols + c];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / n;
        }
        for r in 0..rows {
            for c in 0..cols {
                let d = xs[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v / n;
        }
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (xs[r * cols + c] - mean[c]) / (var[c] + eps).sqrt();
            }
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        self.check_finite(id, "batch_norm_cols")?;
        if grad {
            self.ops.push(Op::BatchNormCols { x, out: id, rows, cols, eps });
        }
        Ok((id, mean, var))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: E = self.values[x.0].iter().cloned().sum();
        let grad = self.needs_grad[x.0];
        let id = self.push_node(vec![s], vec![1], grad);
        self.check_finite(id, "sum_all")?;
        if grad {
            self.ops.push(Op::SumAll { x, out: id });
        }
        Ok(id)
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.values[x.0].len();
        if n == 0 {
            return Err(DfError::Shape("mean_all of empty tensor".into()));
        }
        let s: E = self.values[x.0].iter().cloned().sum();
        let m = s / E::from_f64(n as f64);
        let grad = self.needs_grad[x.0];
        let id = self.push_node(vec![m], vec![1], grad);
        self.check_finite(id, "mean_all")?;
        if grad {
            self.ops.push(Op::MeanAll { x, out: id });
        }
        Ok(id)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(DfError::Shape("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.dims2(inputs[0], "concat_rows")?;
        let mut row_counts = Vec::with_capacity(inputs.len());
        let mut total_rows = 0;
        for &t in inputs {
            let (r, c) = self.dims2(t, "concat_rows")?;
            if c != cols {
                return Err(DfError::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            row_counts.push(r);
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &t in inputs {
            out.extend_from_slice(&self.values[t.0]);
        }
        let grad = inputs.iter().any(|t| self.needs_grad[t.0]);
        let id = self.push_node(out, vec![total_rows, cols], grad);
        if grad {
            self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out: id, cols, row_counts });
        }
        Ok(id)
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(DfError::Shape("concat_cols of zero tensors".into()));
        }
        let (rows, _) = self.dims2(inputs[0], "concat_cols")?;
        let mut col_counts = Vec::with_capacity(inputs.len());
        let mut total_cols = 0;
        for &t in inputs {
            let (r, c) = self.dims2(t, "concat_cols")?;
            if r != rows {
                return Err(DfError::Shape(format!("concat_cols: row mismatch {r} vs {rows}")));
            }
            col_counts.push(c);
            total_cols += c;
        }
        let mut out = vec![E::zero(); rows * total_cols];
        let mut offset = 0;
        for (i, &t) in inputs.iter().enumerate() {
            let c = col_counts[i];
            for r in 0..rows {
                out[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&self.values[t.0][r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let grad = inputs.iter().any(|t| self.needs_grad[t.0]);
        let id = self.push_node(out, vec![rows, total_cols], grad);
        if grad {
            self.ops.push(Op::ConcatCols { inputs: inputs.to_vec(), out: id, rows, col_counts });
        }
        Ok(id)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, rows: usize) -> Result<TensorId> {
        let (total, cols) = self.dims2(x, "slice_rows")?;
        if start + rows > total {
            return Err(DfError::Shape(format!(
                "slice_rows: [{start}, {}) out of {total} rows",
                start + rows
            )));
        }
        let out = self.values[x.0][start * cols..(start + rows) * cols].to_vec();
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        if grad {
            self.ops.push(Op::SliceRows { x, out: id, start, rows, cols });
        }
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, cols: usize) -> Result<TensorId> {
        let (rows, total_cols) = self.dims2(x, "slice_cols")?;
        if start + cols > total_cols {
            return Err(DfError::Shape(format!(
                "slice_cols: [{start}, {}) out of {total_cols} cols",
                start + cols
            )));
        }
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .copy_from_slice(&self.values[x.0][r * total_cols + start..r * total_cols + start + cols]);
        }
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![rows, cols], grad);
        if grad {
            self.ops.push(Op::SliceCols { x, out: id, start, cols, total_cols, rows });
        }
        Ok(id)
    }

    /// Gather rows from a table: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        for &i in indices {
            if i >= rows {
                return Err(DfError::Shape(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&self.values[table.0][i * cols..(i + 1) * cols]);
        }
        let grad = self.needs_grad[table.0];
        let id = self.push_node(out, vec![indices.len(), cols], grad);
        if grad {
            self.ops.push(Op::GatherRows { table, indices: indices.to_vec(), out: id, cols });
        }
        Ok(id)
    }

    /// Gather scalar elements by flat index; output shape `[n]`.
    pub fn gather_flat(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let n = self.values[x.0].len();
        for &i in indices {
            if i >= n {
                return Err(DfError::Shape(format!(
                    "gather_flat: index {i} out of range for {n} elements"
                )));
            }
        }
        let out: Vec<E> = indices.iter().map(|&i| self.values[x.0][i]).collect();
        let grad = self.needs_grad[x.0];
        let id = self.push_node(out, vec![indices.len()], grad);
        if grad {
            self.ops.push(Op::GatherFlat { x, indices: indices.to_vec(), out: id });
        }
        Ok(id)
    }

    /// Inverted dropout with the given keep mask; scale = 1/(1-rate).
    pub fn dropout(&mut self, x: TensorId, keep: &[bool], scale: E) -> Result<TensorId> {
        if keep.len() != self.values[x.0].len() {
            return Err(DfError::Shape("dropout: mask length mismatch".into()));
        }
        let out: Vec<E> = self.values[x.0]
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v * scale } else { E::zero() })
            .collect();
        let grad = self.needs_grad[x.0];
        let shape = self.shapes[x.0].clone();
        let id = self.push_node(out, shape, grad);
        if grad {
            self.ops.push(Op::Dropout { x, keep: keep.to_vec(), scale, out: id });
        }
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-replay the tape from a scalar loss. Consumes the tape: a
    /// second call without new recorded operations is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients<E>> {
        if self.numel(loss) != 1 {
            return Err(DfError::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        if self.consumed {
            return Err(DfError::Numeric(
                "backward: tape already consumed; record new operations or clear_tape first".into(),
            ));
        }
        self.consumed = true;
        let mut slots: Vec<Option<Vec<E>>> = vec![None; self.values.len()];
        slots[loss.0] = Some(vec![E::one()]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op, &mut slots);
        }
        self.ops = ops;
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Vec<E>>], id: TensorId, add: impl FnOnce(&mut [E])) {
        if !self.needs_grad[id.0] {
            return;
        }
        let slot = &mut slots[id.0];
        if slot.is_none() {
            *slot = Some(vec![E::zero(); self.values[id.0].len()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, op: &Op<E>, slots: &mut [Option<Vec<E>>]) {
        macro_rules! grad_of {
            ($id:expr) => {
                match &slots[$id.0] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let d = grad_of!(out);
                let (m, k, n) = (*m, *k, *n);
                if self.needs_grad[a.0] {
                    let bv = &self.values[b.0];
                    self.accumulate(slots, *a, |ga| matmul_nt_acc(&d, bv, ga, m, n, k));
                }
                if self.needs_grad[b.0] {
                    let av = &self.values[a.0];
                    self.accumulate(slots, *b, |gb| matmul_tn_acc(av, &d, gb, m, k, n));
                }
            }
            Op::Transpose { x, out, rows, cols } => {
                let d = grad_of!(out);
                let (rows, cols) = (*rows, *cols);
                self.accumulate(slots, *x, |gx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += d[j * rows + i];
                        }
                    }
                });
            }
            Op::Reshape { x, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |gx| {
                    for (g, dv) in gx.iter_mut().zip(&d) {
                        *g += *dv;
                    }
                });
            }
            Op::Add { a, b, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *a, |g| axpy(g, &d, E::one()));
                self.accumulate(slots, *b, |g| axpy(g, &d, E::one()));
            }
            Op::Sub { a, b, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *a, |g| axpy(g, &d, E::one()));
                self.accumulate(slots, *b, |g| axpy(g, &d, -E::one()));
            }
            Op::Mul { a, b, out } => {
                let d = grad_of!(out);
                if self.needs_grad[a.0] {
                    let bv = &self.values[b.0];
                    self.accumulate(slots, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += d[i] * bv[i];
                        }
                    });
                }
                if self.needs_grad[b.0] {
                    let av = &self.values[a.0];
                    self.accumulate(slots, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += d[i] * av[i];
                        }
                    });
                }
            }
            Op::Div { a, b, out } => {
                let d = grad_of!(out);
                let bv = &self.values[b.0];
                if self.needs_grad[a.0] {
                    self.accumulate(slots, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += d[i] / bv[i];
                        }
                    });
                }
                if self.needs_grad[b.0] {
                    let ov = &self.values[out.0];
                    self.accumulate(slots, *b, |g| {
                        for i in 0..g.len() {
                            g[i] -= d[i] * ov[i] / bv[i];
                        }
                    });
                }
            }
            Op::Scale { x, factor, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| axpy(g, &d, *factor));
            }
            Op::AddScalar { x, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| axpy(g, &d, E::one()));
            }
            Op::Relu { x, out } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > E::zero() {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::Sigmoid { x, out } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * ov[i] * (E::one() - ov[i]);
                    }
                });
            }
            Op::Tanh { x, out } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * (E::one() - ov[i] * ov[i]);
                    }
                });
            }
            Op::Exp { x, out } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] * ov[i];
                    }
                });
            }
            Op::Ln { x, out } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += d[i] / xv[i];
                    }
                });
            }
            Op::Sqrt { x, out } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                let floor = E::from_f64(1e-12);
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        let denom = if ov[i] > floor { ov[i] } else { floor };
                        g[i] += d[i] / (denom + denom);
                    }
                });
            }
            Op::Clamp { x, lo, hi, out } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            g[i] += d[i];
                        }
                    }
                });
            }
            Op::AddRow { x, v, out, rows, cols } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| axpy(g, &d, E::one()));
                self.accumulate(slots, *v, |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[c] += d[r * cols + c];
                        }
                    }
                });
            }
            Op::MulRow { x, v, out, rows, cols } => {
                let d = grad_of!(out);
                if self.needs_grad[x.0] {
                    let vv = &self.values[v.0];
                    self.accumulate(slots, *x, |g| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[r * cols + c] += d[r * cols + c] * vv[c];
                            }
                        }
                    });
                }
                if self.needs_grad[v.0] {
                    let xv = &self.values[x.0];
                    self.accumulate(slots, *v, |g| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[c] += d[r * cols + c] * xv[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::ScaleRows { x, factors, out, cols } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    for (r, &f) in factors.iter().enumerate() {
                        for c in 0..*cols {
                            g[r * cols + c] += d[r * cols + c] * f;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, out, rows, cols } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for r in 0..*rows {
                        let o = &ov[r * cols..(r + 1) * cols];
                        let dr = &d[r * cols..(r + 1) * cols];
                        let dot: E = o.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for c in 0..*cols {
                            g[r * cols + c] += o[c] * (dr[c] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { x, key_mask, out, rows, cols } => {
                let d = grad_of!(out);
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for r in 0..*rows {
                        let o = &ov[r * cols..(r + 1) * cols];
                        let dr = &d[r * cols..(r + 1) * cols];
                        let dot: E = o.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for c in 0..*cols {
                            if key_mask[c] {
                                g[r * cols + c] += o[c] * (dr[c] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExpRows { x, out, rows, cols } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                let ov = &self.values[out.0];
                self.accumulate(slots, *x, |g| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[r * cols + c] += d[r] * (xv[r * cols + c] - ov[r]).exp();
                        }
                    }
                });
            }
            Op::LayerNormRows { x, out, rows, cols, eps } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                let n = E::from_f64(*cols as f64);
                self.accumulate(slots, *x, |g| {
                    for r in 0..*rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let dr = &d[r * cols..(r + 1) * cols];
                        let mean = row.iter().cloned().sum::<E>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
                        let inv = E::one() / (var + *eps).sqrt();
                        let mut dmean = E::zero();
                        let mut dxdot = E::zero();
                        for c in 0..*cols {
                            let xhat = (row[c] - mean) * inv;
                            dmean += dr[c];
                            dxdot += dr[c] * xhat;
                        }
                        dmean = dmean / n;
                        dxdot = dxdot / n;
                        for c in 0..*cols {
                            let xhat = (row[c] - mean) * inv;
                            g[r * cols + c] += inv * (dr[c] - dmean - xhat * dxdot);
                        }
                    }
                });
            }
            Op::BatchNormCols { x, out, rows, cols, eps } => {
                let d = grad_of!(out);
                let xv = &self.values[x.0];
                let n = E::from_f64(*rows as f64);
                self.accumulate(slots, *x, |g| {
                    for c in 0..*cols {
                        let mut mean = E::zero();
                        for r in 0..*rows {
                            mean += xv[r * cols + c];
                        }
                        mean = mean / n;
                        let mut var = E::zero();
                        for r in 0..*rows {
                            let dv = xv[r * cols + c] - mean;
                            var += dv * dv;
                        }
                        var = var / n;
                        let inv = E::one() / (var + *eps).sqrt();
                        let mut dmean = E::zero();
                        let mut dxdot = E::zero();
                        for r in 0..*rows {
                            let xhat = (xv[r * cols + c] - mean) * inv;
                            dmean += d[r * cols + c];
                            dxdot += d[r * cols + c] * xhat;
                        }
                        dmean = dmean / n;
                        dxdot = dxdot / n;
                        for r in 0..*rows {
                            let xhat = (xv[r * cols + c] - mean) * inv;
                            g[r * cols + c] += inv * (d[r * cols + c] - dmean - xhat * dxdot);
                        }
                    }
                });
            }
            Op::SumAll { x, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    for v in g.iter_mut() {
                        *v += d[0];
                    }
                });
            }
            Op::MeanAll { x, out } => {
                let d = grad_of!(out);
                let scale = d[0] / E::from_f64(self.values[x.0].len() as f64);
                self.accumulate(slots, *x, |g| {
                    for v in g.iter_mut() {
                        *v += scale;
                    }
                });
            }
            Op::ConcatRows { inputs, out, cols, row_counts } => {
                let d = grad_of!(out);
                let mut offset = 0;
                for (i, &t) in inputs.iter().enumerate() {
                    let r = row_counts[i];
                    let block = &d[offset * cols..(offset + r) * cols];
                    self.accumulate(slots, t, |g| axpy(g, block, E::one()));
                    offset += r;
                }
            }
            Op::ConcatCols { inputs, out, rows, col_counts } => {
                let d = grad_of!(out);
                let total_cols: usize = col_counts.iter().sum();
                let mut offset = 0;
                for (i, &t) in inputs.iter().enumerate() {
                    let c = col_counts[i];
                    self.accumulate(slots, t, |g| {
                        for r in 0..*rows {
                            for j in 0..c {
                                g[r * c + j] += d[r * total_cols + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { x, out, start, rows, cols } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    let base = start * cols;
                    for i in 0..rows * cols {
                        g[base + i] += d[i];
                    }
                });
            }
            Op::SliceCols { x, out, start, cols, total_cols, rows } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    for r in 0..*rows {
                        for j in 0..*cols {
                            g[r * total_cols + start + j] += d[r * cols + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, indices, out, cols } => {
                let d = grad_of!(out);
                self.accumulate(slots, *table, |g| {
                    for (i, &idx) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            g[idx * cols + c] += d[i * cols + c];
                        }
                    }
                });
            }
            Op::GatherFlat { x, indices, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    for (i, &idx) in indices.iter().enumerate() {
                        g[idx] += d[i];
                    }
                });
            }
            Op::Dropout { x, keep, scale, out } => {
                let d = grad_of!(out);
                self.accumulate(slots, *x, |g| {
                    for i in 0..g.len() {
                        if keep[i] {
                            g[i] += d[i] * *scale;
                        }
                    }
                });
            }
        }
    }
}

fn axpy<E: Real>(dst: &mut [E], src: &[E], factor: E) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s * factor;
    }
}

/// C = A[m,k] . B[k,n], accumulating into a zeroed buffer.
pub fn matmul_nn<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m,n] . B[k,n]^T  (i.e. C[m,k] += A . B^T).
fn matmul_nt_acc<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut dot = E::zero();
            for (av, bv) in arow.iter().zip(brow) {
                dot += *av * *bv;
            }
            c[i * k + p] += dot;
        }
    }
}

/// C += A[m,k]^T . B[m,n]  (i.e. C[k,n] += A^T . B).
fn matmul_tn_acc<E: Real>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let eye = g.leaf(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![3, 3]);
        let b = g.leaf((1..=9).map(f64::from).collect(), vec![3, 3]);
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c), g.value(b));
    }

    #[test]
    fn matmul_hand_example() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let a = g.leaf(vec![1., 2., 3., 4.], vec![2, 2]);
        let b = g.leaf(vec![0., 1.], vec![2, 1]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[2., 4.]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(101);
        let (m, k, n) = (5, 7, 3);
        let av = randv(&mut rng, m * k);
        let bv = randv(&mut rng, k * n);
        // independent triple-loop oracle in ijp order
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let a = g.leaf(av, vec![m, k]);
        let b = g.leaf(bv, vec![k, n]);
        let c = g.matmul(a, b).unwrap();
        for (got, want) in g.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let a = g.leaf(vec![0.0; 6], vec![2, 3]);
        let b = g.leaf(vec![0.0; 8], vec![4, 2]);
        assert!(matches!(g.matmul(a, b), Err(DfError::Shape(_))));
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        let mut rng = Rng::new(55);
        for _ in 0..20 {
            let mut g: Graph<f64> = Graph::new();
            g.freeze_params();
            let a = g.leaf(randv(&mut rng, 16), vec![4, 4]);
            let b = g.leaf(randv(&mut rng, 16), vec![4, 4]);
            let c = g.leaf(randv(&mut rng, 16), vec![4, 4]);
            let ab = g.matmul(a, b).unwrap();
            let abc1 = g.matmul(ab, c).unwrap();
            let bc = g.matmul(b, c).unwrap();
            let abc2 = g.matmul(a, bc).unwrap();
            for (x, y) in g.value(abc1).iter().zip(g.value(abc2)) {
                let denom = x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() / denom < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![0., 0., 0.], vec![1, 3]);
        let s = g.softmax_rows(x).unwrap();
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.leaf(vec![1000., 1000.], vec![1, 2]);
        let s2 = g.softmax_rows(big).unwrap();
        assert!((g.value(s2)[0] - 0.5).abs() < 1e-15);
        assert!((g.value(s2)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![1., 2., 3.], vec![1, 3]);
        let s = g.softmax_rows(x).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in g.value(s).iter().enumerate() {
            let want = ((i + 1) as f64).exp() / denom;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(9);
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(randv(&mut rng, 6 * 5), vec![6, 5]);
        let s = g.softmax_rows(x).unwrap();
        for r in 0..6 {
            let sum: f64 = g.value(s)[r * 5..(r + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![4.2; 8], vec![1, 8]);
        let y = g.layer_norm_rows(x, 1e-5).unwrap();
        for v in g.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = Rng::new(31);
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let n = 64;
        let x = g.leaf(randv(&mut rng, n), vec![1, n]);
        let y = g.layer_norm_rows(x, 1e-5).unwrap();
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / n as f64;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_train_mode_statistics() {
        let mut rng = Rng::new(77);
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let (rows, cols) = (16, 4);
        let x = g.leaf(randv(&mut rng, rows * cols), vec![rows, cols]);
        let (y, mean, var) = g.batch_norm_cols(x, 1e-5).unwrap();
        for c in 0..cols {
            let col_mean: f64 = (0..rows).map(|r| g.value(y)[r * cols + c]).sum::<f64>() / rows as f64;
            assert!(col_mean.abs() < 1e-6);
        }
        assert_eq!(mean.len(), cols);
        assert_eq!(var.len(), cols);
    }

    #[test]
    fn batch_norm_rejects_batch_of_one() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![1.0, 2.0], vec![1, 2]);
        assert!(matches!(g.batch_norm_cols(x, 1e-5), Err(DfError::Numeric(_))));
    }

    #[test]
    fn masked_softmax_zero_weight_on_masked() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![5., 1., 3.], vec![1, 3]);
        let s = g.masked_softmax_rows(x, &[true, false, true]).unwrap();
        let v = g.value(s);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        // self-only mask puts full weight on self
        let x2 = g.leaf(vec![9., 2.], vec![1, 2]);
        let s2 = g.masked_softmax_rows(x2, &[true, false]).unwrap();
        assert_eq!(g.value(s2), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![5., 1.], vec![1, 2]);
        let s = g.masked_softmax_rows(x, &[false, false]).unwrap();
        assert_eq!(g.value(s), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1., -2., 3.], vec![3]);
        g.freeze_params();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_dot_gives_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1., -2., 3.], vec![3]);
        g.freeze_params();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1., 2.], vec![2]);
        g.freeze_params();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(DfError::Shape(_))));
    }

    #[test]
    fn backward_consumes_tape() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1., 2.], vec![2]);
        g.freeze_params();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(DfError::Numeric(_))));
        g.clear_tape();
        let s2 = {
            let s = g.sum_all(x).unwrap();
            s
        };
        assert!(g.backward(s2).is_ok());
    }

    #[test]
    fn clear_tape_keeps_params_drops_activations() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(vec![1., 2.], vec![2]);
        g.freeze_params();
        let a = g.leaf(vec![3., 4.], vec![2]);
        let _ = g.add(p, a).unwrap();
        assert!(g.num_ops() > 0);
        g.clear_tape();
        assert_eq!(g.num_ops(), 0);
        assert_eq!(g.value(p), &[1., 2.]);
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![0.0], vec![1]);
        assert!(matches!(g.ln(x), Err(DfError::Numeric(_))));
        let y = g.leaf(vec![1.0, 0.0], vec![2]);
        let r = g.div(y, y);
        assert!(matches!(r, Err(DfError::Numeric(_))));
    }

    #[test]
    fn forward_deterministic_across_runs() {
        let run = || {
            let mut rng = Rng::new(2024);
            let mut g: Graph<f64> = Graph::new();
            g.freeze_params();
            let a = g.leaf(randv(&mut rng, 12), vec![3, 4]);
            let b = g.leaf(randv(&mut rng, 20), vec![4, 5]);
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.value(s).to_vec()
        };
        let x = run();
        let y = run();
        assert_eq!(x, y, "bit-identical forward expected");
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.param(vec![1., 2., 3., 4., 5., 6.], vec![3, 2]);
        g.freeze_params();
        let rows = g.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(g.value(rows), &[5., 6., 1., 2.]);
        let s = g.sum_all(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1., 1., 0., 0., 1., 1.]);
    }

    #[test]
    fn slice_cols_and_concat_cols() {
        let mut g: Graph<f64> = Graph::new();
        g.freeze_params();
        let x = g.leaf(vec![1., 2., 3., 4., 5., 6.], vec![2, 3]);
        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 2).unwrap();
        assert_eq!(g.value(left), &[1., 4.]);
        assert_eq!(g.value(right), &[2., 3., 5., 6.]);
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
