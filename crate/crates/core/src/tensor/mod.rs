//! Minimal reverse-mode gradient engine.
//!
//! A [`Tape`] records primitive applications in topological order; [`Tape::backward`]
//! replays them in reverse, accumulating gradients into every leaf that was
//! registered with `requires_grad`. The engine is fixed at f64 and provides
//! exactly the primitives the micro-LM and hypernetwork need, plus a few
//! structural ops (transpose, row/column slicing, row scatter) the transformer
//! forward pass is built from.
//!
//! One tape is one logical execution context: build, differentiate once, read
//! gradients. Distinct tapes are independent and may run on separate threads.

mod check;
mod kernels;
mod optim;

pub use check::grad_check;
pub use optim::{adamw_step, AdamState, ADAMW_BETA1, ADAMW_BETA2, ADAMW_EPS};

use crate::error::{KbError, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Plain row-major matrix of values, no gradient participation. Used for
/// captured activations, knowledge-block states, and anything at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// n-dimensional numeric array participating in reverse-mode differentiation.
///
/// `values` and `grad` always have identical shape; the gradient of a tensor
/// created without `requires_grad` stays all-zero through any backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(KbError::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if values.len() != numel {
            return Err(KbError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} values, got {}", values.len()),
            });
        }
        let grad = vec![0.0; numel];
        Ok(Self { shape, values, grad, requires_grad })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, values: vec![0.0; numel], grad: vec![0.0; numel], requires_grad }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], values: vec![v], grad: vec![0.0], requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Accumulate `other` into this tensor's gradient slot.
    pub fn accumulate_grad(&mut self, other: &[f64]) -> Result<()> {
        if other.len() != self.grad.len() {
            return Err(KbError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("expected {} elements, got {}", self.grad.len(), other.len()),
            });
        }
        for (g, o) in self.grad.iter_mut().zip(other) {
            *g += o;
        }
        Ok(())
    }

    /// Round every value to the nearest f32-representable number. Checkpoints
    /// store 32-bit floats, so trained parameters are snapped before saving to
    /// make save/load round-trips exact.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// The public primitive set. Structural ops (transpose, slicing, row scatter)
/// are available as tape methods but are not part of this enum.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// `(m,k) @ (k,n) -> (m,n)`
    Matmul,
    /// Same-shape elementwise add, or `(n,d) + (d)` broadcasting the second
    /// operand across rows.
    Add,
    /// Multiply every element by a constant factor.
    Scale { factor: f64 },
    /// Gather rows `ids` from a `(vocab, d)` table, producing `(len(ids), d)`.
    EmbeddingGather { ids: Vec<usize> },
    /// Row-wise layer normalization; inputs `[x (n,d), gain (d), bias (d)]`.
    LayerNorm,
    /// Elementwise GELU (tanh approximation).
    Gelu,
    /// Row-wise softmax over the last axis.
    SoftmaxRows,
    /// Mean negative log-likelihood over the rows with a `Some` target;
    /// input `[logits (n,v)]`, output scalar.
    CrossEntropy { targets: Vec<Option<usize>> },
    /// Mean over rows of KL(softmax(p) || softmax(q)) in natural log;
    /// inputs `[p_logits (n,v), q_logits (n,v)]`, output scalar.
    KlDivergence,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Scale { .. } => "scale",
            Primitive::EmbeddingGather { .. } => "embedding_gather",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::CrossEntropy { .. } => "cross_entropy",
            Primitive::KlDivergence => "kl_divergence",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Add,
    AddBroadcastRow,
    Scale(f64),
    EmbeddingGather(Vec<usize>),
    LayerNorm,
    Gelu,
    SoftmaxRows,
    CrossEntropy(Vec<Option<usize>>),
    KlDivergence,
    Transpose,
    SliceCols { start: usize, end: usize },
    ConcatCols,
    ConcatRows,
    GatherRows(Vec<usize>),
    ScatterRows { start: usize },
    SumAll,
}

struct Entry {
    tensor: DiffTensor,
    op: Op,
    inputs: Vec<TensorId>,
    /// True when this node's value depends on some requires_grad leaf.
    needs_grad: bool,
}

/// Ordered record of primitive applications; one logical writer per tape.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    differentiated: bool,
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

    /// Register an externally owned tensor as a leaf. Values are copied in;
    /// gradients are read back with [`Tape::grad`] after backward.
    pub fn leaf(&mut self, t: &DiffTensor) -> Result<TensorId> {
        self.push_leaf(t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        self.push_leaf(shape, values, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        self.push_leaf(shape, values, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        self.check_open()?;
        let t = DiffTensor::new(shape, values, requires_grad)?;
        if !t.is_finite() {
            return Err(KbError::NonFinite { op: "leaf" });
        }
        Ok(self.push(t, Op::Leaf, vec![], requires_grad))
    }

    fn push(&mut self, tensor: DiffTensor, op: Op, inputs: Vec<TensorId>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.entries.len());
        self.entries.push(Entry { tensor, op, inputs, needs_grad });
        id
    }

    fn check_open(&self) -> Result<()> {
        if self.differentiated {
            return Err(KbError::InvalidArgument(
                "tape already differentiated; build a fresh tape".into(),
            ));
        }
        Ok(())
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.entries[id.0].tensor.shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.entries[id.0].tensor.values
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.entries[id.0].tensor.grad
    }

    pub fn tensor(&self, id: TensorId) -> &DiffTensor {
        &self.entries[id.0].tensor
    }

    fn entry(&self, id: TensorId) -> &Entry {
        &self.entries[id.0]
    }

    fn inputs_finite(&self, op: &'static str, inputs: &[TensorId]) -> Result<()> {
        for &id in inputs {
            if !self.entry(id).tensor.is_finite() {
                return Err(KbError::NonFinite { op });
            }
        }
        Ok(())
    }

    fn inputs_need_grad(&self, inputs: &[TensorId]) -> bool {
        inputs.iter().any(|&id| self.entry(id).needs_grad)
    }

    fn record(&mut self, op: Op, inputs: Vec<TensorId>, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        let needs_grad = self.inputs_need_grad(&inputs);
        let numel = values.len();
        let tensor = DiffTensor {
            shape,
            values,
            grad: vec![0.0; numel],
            requires_grad: needs_grad,
        };
        self.push(tensor, op, inputs, needs_grad)
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(KbError::ShapeMismatch {
                op,
                detail: format!("expected a 2-d tensor, got {s:?}"),
            }),
        }
    }

    fn arity(&self, p: &Primitive, inputs: &[TensorId], expect: usize) -> Result<()> {
        if inputs.len() != expect {
            return Err(KbError::ShapeMismatch {
                op: p.name(),
                detail: format!("expected {expect} inputs, got {}", inputs.len()),
            });
        }
        Ok(())
    }

    /// Apply one of the public primitives, recording it on the tape.
    pub fn apply(&mut self, p: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite(p.name(), inputs)?;
        match p {
            Primitive::Matmul => {
                self.arity(&Primitive::Matmul, inputs, 2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                self.arity(&Primitive::Add, inputs, 2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Scale { factor } => {
                self.arity(&Primitive::Scale { factor }, inputs, 1)?;
                if !factor.is_finite() {
                    return Err(KbError::NonFinite { op: "scale" });
                }
                self.scale(inputs[0], factor)
            }
            Primitive::EmbeddingGather { ids } => {
                if inputs.len() != 1 {
                    return Err(KbError::ShapeMismatch {
                        op: "embedding_gather",
                        detail: format!("expected 1 input, got {}", inputs.len()),
                    });
                }
                self.embedding_gather(inputs[0], ids)
            }
            Primitive::LayerNorm => {
                self.arity(&Primitive::LayerNorm, inputs, 3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Gelu => {
                self.arity(&Primitive::Gelu, inputs, 1)?;
                self.gelu(inputs[0])
            }
            Primitive::SoftmaxRows => {
                self.arity(&Primitive::SoftmaxRows, inputs, 1)?;
                self.softmax_rows(inputs[0])
            }
            Primitive::CrossEntropy { targets } => {
                if inputs.len() != 1 {
                    return Err(KbError::ShapeMismatch {
                        op: "cross_entropy",
                        detail: format!("expected 1 input, got {}", inputs.len()),
                    });
                }
                self.cross_entropy(inputs[0], targets)
            }
            Primitive::KlDivergence => {
                self.arity(&Primitive::KlDivergence, inputs, 2)?;
                self.kl_divergence(inputs[0], inputs[1])
            }
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("matmul", &[a, b])?;
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(KbError::ShapeMismatch {
                op: "matmul",
                detail: format!("({m},{k}) x ({k2},{n})"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(m, k, n, self.values(a), false, self.values(b), false, &mut out, 0.0);
        Ok(self.record(Op::Matmul, vec![a, b], vec![m, n], out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("add", &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let out: Vec<f64> = self
                .values(a)
                .iter()
                .zip(self.values(b))
                .map(|(x, y)| x + y)
                .collect();
            Ok(self.record(Op::Add, vec![a, b], sa, out))
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (n, d) = (sa[0], sa[1]);
            let mut out = self.values(a).to_vec();
            let row = self.values(b);
            for r in 0..n {
                for c in 0..d {
                    out[r * d + c] += row[c];
                }
            }
            Ok(self.record(Op::AddBroadcastRow, vec![a, b], sa, out))
        } else {
            Err(KbError::ShapeMismatch {
                op: "add",
                detail: format!("{sa:?} + {sb:?}"),
            })
        }
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("scale", &[a])?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.values(a).iter().map(|x| x * factor).collect();
        Ok(self.record(Op::Scale(factor), vec![a], shape, out))
    }

    pub fn embedding_gather(&mut self, table: TensorId, ids: Vec<usize>) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("embedding_gather", &[table])?;
        let (v, d) = self.dims2("embedding_gather", table)?;
        if ids.is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "embedding_gather",
                detail: "empty id list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(KbError::ShapeMismatch {
                op: "embedding_gather",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let src = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let n = ids.len();
        Ok(self.record(Op::EmbeddingGather(ids), vec![table], vec![n, d], out))
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("layer_norm", &[x, gain, bias])?;
        let (n, d) = self.dims2("layer_norm", x)?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s != [d] {
                return Err(KbError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} shape {s:?}, expected [{d}]"),
                });
            }
        }
        let out = kernels::layer_norm_forward(self.values(x), n, d, self.values(gain), self.values(bias));
        Ok(self.record(Op::LayerNorm, vec![x, gain, bias], vec![n, d], out))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("gelu", &[x])?;
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = self.values(x).iter().map(|&v| kernels::gelu(v)).collect();
        Ok(self.record(Op::Gelu, vec![x], shape, out))
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("softmax_rows", &[x])?;
        let (n, d) = self.dims2("softmax_rows", x)?;
        let out = kernels::softmax_rows_forward(self.values(x), n, d);
        Ok(self.record(Op::SoftmaxRows, vec![x], vec![n, d], out))
    }

    pub fn cross_entropy(&mut self, logits: TensorId, targets: Vec<Option<usize>>) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("cross_entropy", &[logits])?;
        let (n, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(KbError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} rows but {} targets", targets.len()),
            });
        }
        if !targets.iter().any(|t| t.is_some()) {
            return Err(KbError::ShapeMismatch {
                op: "cross_entropy",
                detail: "no target positions".into(),
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(KbError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("target id {bad} out of range for {v} classes"),
            });
        }
        let loss = kernels::cross_entropy_forward(self.values(logits), n, v, &targets);
        Ok(self.record(Op::CrossEntropy(targets), vec![logits], vec![], vec![loss]))
    }

    pub fn kl_divergence(&mut self, p_logits: TensorId, q_logits: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("kl_divergence", &[p_logits, q_logits])?;
        let (n, v) = self.dims2("kl_divergence", p_logits)?;
        let (n2, v2) = self.dims2("kl_divergence", q_logits)?;
        if (n, v) != (n2, v2) {
            return Err(KbError::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("({n},{v}) vs ({n2},{v2})"),
            });
        }
        let out = kernels::kl_forward(self.values(p_logits), self.values(q_logits), n, v);
        Ok(self.record(Op::KlDivergence, vec![p_logits, q_logits], vec![], vec![out]))
    }

    // ── Structural ops ──────────────────────────────────────────────────

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_open()?;
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.record(Op::Transpose, vec![a], vec![c, r], out))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.check_open()?;
        let (r, c) = self.dims2("slice_cols", a)?;
        if start >= end || end > c {
            return Err(KbError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {c}"),
            });
        }
        let w = end - start;
        let src = self.values(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.record(Op::SliceCols { start, end }, vec![a], vec![r, w], out))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ri, ci) = self.dims2("concat_cols", p)?;
            if ri != r {
                return Err(KbError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {ri}"),
                });
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.values(p);
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(self.record(Op::ConcatCols, parts.to_vec(), vec![r, total], out))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let (_, c) = self.dims2("concat_rows", parts[0])?;
        let mut total_rows = 0;
        for &p in parts {
            let (ri, ci) = self.dims2("concat_rows", p)?;
            if ci != c {
                return Err(KbError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {ci}"),
                });
            }
            total_rows += ri;
        }
        let mut out = Vec::with_capacity(total_rows * c);
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        Ok(self.record(Op::ConcatRows, parts.to_vec(), vec![total_rows, c], out))
    }

    pub fn gather_rows(&mut self, a: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        self.check_open()?;
        let (r, c) = self.dims2("gather_rows", a)?;
        if rows.is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "gather_rows",
                detail: "empty row list".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(KbError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let src = self.values(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let n = rows.len();
        Ok(self.record(Op::GatherRows(rows), vec![a], vec![n, c], out))
    }

    /// Replace rows `start..start+m` of `base` with `replacement` (m rows).
    /// Gradient flows into both inputs: `base` outside the window,
    /// `replacement` inside it.
    pub fn scatter_rows(&mut self, base: TensorId, replacement: TensorId, start: usize) -> Result<TensorId> {
        self.check_open()?;
        let (n, d) = self.dims2("scatter_rows", base)?;
        let (m, d2) = self.dims2("scatter_rows", replacement)?;
        if d != d2 || start + m > n {
            return Err(KbError::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("replacing rows {start}..{} of ({n},{d}) with ({m},{d2})", start + m),
            });
        }
        let mut out = self.values(base).to_vec();
        out[start * d..(start + m) * d].copy_from_slice(self.values(replacement));
        Ok(self.record(Op::ScatterRows { start }, vec![base, replacement], vec![n, d], out))
    }

    /// Roll the tape back to a previous length, discarding later nodes and
    /// re-opening it for recording. Retained requires-grad entries get their
    /// gradient slots cleared. This is how a long-lived context (an inference
    /// session, a training step loop over a frozen prefix) reuses leaves
    /// without re-copying them.
    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.entries.len(), "truncate beyond tape length");
        self.entries.truncate(len);
        if self.differentiated {
            self.differentiated = false;
            for e in &mut self.entries {
                if e.needs_grad {
                    e.tensor.zero_grad();
                }
            }
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_open()?;
        self.inputs_finite("sum_all", &[a])?;
        let total: f64 = self.values(a).iter().sum();
        Ok(self.record(Op::SumAll, vec![a], vec![], vec![total]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf ends up
    /// with `grad = d loss / d leaf`; the tape is consumed (no further ops).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_open()?;
        if !self.shape(loss).is_empty() {
            return Err(KbError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.differentiated = true;

        // Restrict the sweep to nodes the loss actually depends on.
        let mut active = vec![false; self.entries.len()];
        active[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if active[i] {
                for &inp in &self.entries[i].inputs {
                    active[inp.0] = true;
                }
            }
        }

        self.entries[loss.0].tensor.grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !active[i] || !self.entries[i].needs_grad {
                continue;
            }
            self.backprop_entry(i)?;
        }
        Ok(())
    }

    fn backprop_entry(&mut self, i: usize) -> Result<()> {
        let inputs = self.entries[i].inputs.clone();
        let op = self.entries[i].op.clone();
        if matches!(op, Op::Leaf) {
            return Ok(());
        }
        // Split borrows: the output entry is read-only, input grads are written.
        let (out_grad, out_values) = {
            let e = &self.entries[i];
            (e.tensor.grad.clone(), e.tensor.values.clone())
        };

        macro_rules! input_needs {
            ($k:expr) => {
                self.entries[inputs[$k].0].needs_grad
            };
        }
        macro_rules! input_values {
            ($k:expr) => {
                &self.entries[inputs[$k].0].tensor.values
            };
        }

        match op {
            Op::Leaf => {}
            Op::Matmul => {
                let (m, k) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                let n = self.shape(inputs[1])[1];
                if input_needs!(0) {
                    let b = input_values!(1).clone();
                    let da = &mut self.entries[inputs[0].0].tensor.grad;
                    kernels::mm(m, n, k, &out_grad, false, &b, true, da, 1.0);
                }
                if input_needs!(1) {
                    let a = input_values!(0).clone();
                    let db = &mut self.entries[inputs[1].0].tensor.grad;
                    kernels::mm(k, m, n, &a, true, &out_grad, false, db, 1.0);
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if input_needs!(k) {
                        let g = &mut self.entries[inputs[k].0].tensor.grad;
                        for (gi, oi) in g.iter_mut().zip(&out_grad) {
                            *gi += oi;
                        }
                    }
                }
            }
            Op::AddBroadcastRow => {
                let (n, d) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                if input_needs!(0) {
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for (gi, oi) in g.iter_mut().zip(&out_grad) {
                        *gi += oi;
                    }
                }
                if input_needs!(1) {
                    let g = &mut self.entries[inputs[1].0].tensor.grad;
                    for r in 0..n {
                        for c in 0..d {
                            g[c] += out_grad[r * d + c];
                        }
                    }
                }
            }
            Op::Scale(f) => {
                if input_needs!(0) {
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for (gi, oi) in g.iter_mut().zip(&out_grad) {
                        *gi += f * oi;
                    }
                }
            }
            Op::EmbeddingGather(ids) => {
                if input_needs!(0) {
                    let d = self.shape(inputs[0])[1];
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += out_grad[row * d + c];
                        }
                    }
                }
            }
            Op::LayerNorm => {
                let (n, d) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                let x = input_values!(0).clone();
                let gain = input_values!(1).clone();
                let (dx, dgain, dbias) = kernels::layer_norm_backward(&x, n, d, &gain, &out_grad);
                if input_needs!(0) {
                    self.entries[inputs[0].0].tensor.accumulate_grad(&dx)?;
                }
                if input_needs!(1) {
                    self.entries[inputs[1].0].tensor.accumulate_grad(&dgain)?;
                }
                if input_needs!(2) {
                    self.entries[inputs[2].0].tensor.accumulate_grad(&dbias)?;
                }
            }
            Op::Gelu => {
                if input_needs!(0) {
                    let x = input_values!(0).clone();
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for ((gi, &xi), oi) in g.iter_mut().zip(&x).zip(&out_grad) {
                        *gi += kernels::gelu_deriv(xi) * oi;
                    }
                }
            }
            Op::SoftmaxRows => {
                if input_needs!(0) {
                    let (n, d) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let dx = kernels::softmax_rows_backward(&out_values, n, d, &out_grad);
                    self.entries[inputs[0].0].tensor.accumulate_grad(&dx)?;
                }
            }
            Op::CrossEntropy(targets) => {
                if input_needs!(0) {
                    let (n, v) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let logits = input_values!(0).clone();
                    let dlogits = kernels::cross_entropy_backward(&logits, n, v, &targets, out_grad[0]);
                    self.entries[inputs[0].0].tensor.accumulate_grad(&dlogits)?;
                }
            }
            Op::KlDivergence => {
                let (n, v) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                let p_logits = input_values!(0).clone();
                let q_logits = input_values!(1).clone();
                let (dp, dq) = kernels::kl_backward(&p_logits, &q_logits, n, v, out_grad[0]);
                if input_needs!(0) {
                    self.entries[inputs[0].0].tensor.accumulate_grad(&dp)?;
                }
                if input_needs!(1) {
                    self.entries[inputs[1].0].tensor.accumulate_grad(&dq)?;
                }
            }
            Op::Transpose => {
                if input_needs!(0) {
                    let (r, c) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += out_grad[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { start, end } => {
                if input_needs!(0) {
                    let (r, c) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let w = end - start;
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for i in 0..r {
                        for j in 0..w {
                            g[i * c + start + j] += out_grad[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols => {
                let r = self.shape(inputs[0])[0];
                let mut offset = 0;
                let total: usize = inputs.iter().map(|&p| self.shape(p)[1]).sum();
                for &p in &inputs {
                    let w = self.shape(p)[1];
                    if self.entries[p.0].needs_grad {
                        let g = &mut self.entries[p.0].tensor.grad;
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += out_grad[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows => {
                let mut row_offset = 0;
                for &p in &inputs {
                    let (ri, c) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.entries[p.0].needs_grad {
                        let g = &mut self.entries[p.0].tensor.grad;
                        let src = &out_grad[row_offset * c..(row_offset + ri) * c];
                        for (gi, oi) in g.iter_mut().zip(src) {
                            *gi += oi;
                        }
                    }
                    row_offset += ri;
                }
            }
            Op::GatherRows(rows) => {
                if input_needs!(0) {
                    let c = self.shape(inputs[0])[1];
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for (k, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[row * c + j] += out_grad[k * c + j];
                        }
                    }
                }
            }
            Op::SumAll => {
                if input_needs!(0) {
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for gi in g.iter_mut() {
                        *gi += out_grad[0];
                    }
                }
            }
            Op::ScatterRows { start } => {
                let d = self.shape(inputs[0])[1];
                let m = self.shape(inputs[1])[0];
                if input_needs!(0) {
                    let g = &mut self.entries[inputs[0].0].tensor.grad;
                    for (idx, oi) in out_grad.iter().enumerate() {
                        let row = idx / d;
                        if row < start || row >= start + m {
                            g[idx] += oi;
                        }
                    }
                }
                if input_needs!(1) {
                    let g = &mut self.entries[inputs[1].0].tensor.grad;
                    for (gi, oi) in g.iter_mut().zip(&out_grad[start * d..(start + m) * d]) {
                        *gi += oi;
                    }
                }
            }
        }
        Ok(())
    }
}
