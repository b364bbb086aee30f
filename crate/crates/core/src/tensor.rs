//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one unit of work (one batch
//! forward/backward, one decode, one probe). Operations append nodes and
//! return [`TensorId`] handles; [`Tape::backward`] replays adjoint rules in
//! reverse creation order. A tape is a single-threaded unit; independent
//! tapes may run concurrently.
//!
//! Only the operations the model needs exist here: 2-D matmul, transpose,
//! elementwise arithmetic, row-broadcast bias addition, (log-)softmax,
//! layer norm, masked mean pooling, concatenation/slicing, embedding row
//! lookup, and two loss reductions. Broadcasting beyond bias addition is
//! deliberately rejected so every adjoint stays auditable.

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type: f32 for training, f64 for gradient checking.
pub trait Real:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Display
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One recorded tensor: shape, values, and (after backward) a gradient.
#[derive(Debug)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    op: Op<F>,
    /// True when this node lies on a path from a requires_grad leaf.
    on_grad_path: bool,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Scale { a: TensorId, c: f64 },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    SoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    PickPerRow { a: TensorId, idx: Vec<usize> },
    SumAll { a: TensorId },
    MeanRows { a: TensorId, keep: Vec<usize> },
    Concat0 { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize, len: usize },
    SliceRows { a: TensorId, start: usize, len: usize },
    Reshape { a: TensorId },
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    EmbedRows { table: TensorId, ids: Vec<usize> },
    BceWithLogits { logits: TensorId, targets: Vec<F>, mask: Vec<F> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::SoftmaxRows { .. } => "softmax",
            Op::LogSoftmaxRows { .. } => "log_softmax",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::SumAll { .. } => "sum",
            Op::MeanRows { .. } => "mean_pool",
            Op::Concat0 { .. } => "concat0",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape { .. } => "reshape",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::EmbedRows { .. } => "embed",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Row-major C[m,n] = A[m,k] * B[k,n].
pub(crate) fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T.
fn mm_bt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
fn mm_at<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn softmax_row_inplace<F: Real>(row: &mut [F]) {
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Operation tape. Nodes only reference earlier nodes, so creation order is
/// a topological order and backward is a single reverse sweep.
pub struct Tape<F: Real> {
    nodes: Vec<Tensor<F>>,
    /// Gradient fault injection for checker verification: adjoint
    /// contributions of the named op get scaled by 1.5 during backward.
    fault: Option<&'static str>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    /// Corrupt adjoints of ops whose name matches, so a finite-difference
    /// check can prove it detects broken gradients. Not for normal use.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, values: Vec<F>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        let on_grad_path = match &op {
            Op::Leaf => requires_grad,
            other => self.parents_of(other).iter().any(|p| self.nodes[p.0].on_grad_path),
        };
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
            on_grad_path,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn parents_of(&self, op: &Op<F>) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::SoftmaxRows { a }
            | Op::LogSoftmaxRows { a }
            | Op::PickPerRow { a, .. }
            | Op::SumAll { a }
            | Op::MeanRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Reshape { a } => vec![*a],
            Op::Concat0 { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::EmbedRows { table, .. } => vec![*table],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    // ── constructors ────────────────────────────────────────────────

    pub fn leaf(&mut self, values: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if numel(&shape) != values.len() {
            return Err(shape_err(format!(
                "leaf: {} values do not fill shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape, values, requires_grad))
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(&mut self, values: Vec<F>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = numel(&shape);
        self.push(Op::Leaf, shape, vec![F::zero(); n], false)
    }

    pub fn scalar(&mut self, v: F) -> TensorId {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s {
            [m, n] => Ok((*m, *n)),
            _ => Err(shape_err(format!("{what}: expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    // ── operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul: inner dimensions disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = mm(self.values(a), self.values(b), m, k, n);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], values, false))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let av = self.values(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, vec![n, m], out, false))
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: operand shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let values: Vec<F> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, shape, values, false))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let values: Vec<F> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a, b }, shape, values, false))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let values: Vec<F> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, shape, values, false))
    }

    /// Broadcast a length-n bias over the rows of a [m, n] tensor. The only
    /// broadcasting form supported.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_bias lhs")?;
        let bs = self.shape(bias);
        if bs != [n] {
            return Err(shape_err(format!(
                "add_bias: bias shape {:?} does not match row width of {:?}",
                bs,
                self.shape(a)
            )));
        }
        let av = self.values(a);
        let bv = self.values(bias);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(Op::AddBias { a, bias }, vec![m, n], out, false))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cf = F::from_f64(c);
        let values: Vec<F> = self.values(a).iter().map(|&x| x * cf).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a, c }, shape, values, false)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let values: Vec<F> = self.values(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh { a }, shape, values, false)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = F::one();
        let values: Vec<F> = self.values(a).iter().map(|&x| one / (one + (-x).exp())).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid { a }, shape, values, false)
    }

    /// `1 - z`, elementwise.
    pub fn one_minus(&mut self, z: TensorId) -> Result<TensorId> {
        let shape = self.shape(z).to_vec();
        let n = numel(&shape);
        let ones = self.constant(vec![F::one(); n], shape)?;
        self.sub(ones, z)
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor, max-subtracted for
    /// stability. Axis slices must be non-empty.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.soft_or_logsoft(a, axis, false)
    }

    /// Log-softmax along `axis`; same contract as [`Tape::softmax`].
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.soft_or_logsoft(a, axis, true)
    }

    fn soft_or_logsoft(&mut self, a: TensorId, axis: usize, log: bool) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        match (shape.len(), axis) {
            (1, 0) => {
                let n = shape[0];
                if n == 0 {
                    return Err(shape_err("softmax: empty axis".into()));
                }
                let row = self.reshape(a, vec![1, n])?;
                let s = if log { self.log_softmax_rows(row)? } else { self.softmax_rows(row)? };
                self.reshape(s, vec![n])
            }
            (2, 1) => {
                if log {
                    self.log_softmax_rows(a)
                } else {
                    self.softmax_rows(a)
                }
            }
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = if log { self.log_softmax_rows(t)? } else { self.softmax_rows(t)? };
                self.transpose(s)
            }
            _ => Err(shape_err(format!(
                "softmax: axis {axis} invalid for shape {shape:?}"
            ))),
        }
    }

    fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "softmax")?;
        if n == 0 {
            return Err(shape_err("softmax: empty axis".into()));
        }
        let mut values = self.values(a).to_vec();
        for i in 0..m {
            softmax_row_inplace(&mut values[i * n..(i + 1) * n]);
        }
        Ok(self.push(Op::SoftmaxRows { a }, vec![m, n], values, false))
    }

    fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "log_softmax")?;
        if n == 0 {
            return Err(shape_err("log_softmax: empty axis".into()));
        }
        let mut values = self.values(a).to_vec();
        for i in 0..m {
            let row = &mut values[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter() {
                sum += (*v - mx).exp();
            }
            let lse = mx + sum.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Ok(self.push(Op::LogSoftmaxRows { a }, vec![m, n], values, false))
    }

    /// out[i] = a[i, idx[i]] for a [m, n] tensor, producing shape [m].
    pub fn pick_per_row(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "pick_per_row")?;
        if idx.len() != m {
            return Err(shape_err(format!(
                "pick_per_row: {} indices for {m} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(shape_err(format!(
                "pick_per_row: column index {bad} out of range for width {n}"
            )));
        }
        let av = self.values(a);
        let values: Vec<F> = idx.iter().enumerate().map(|(i, &j)| av[i * n + j]).collect();
        Ok(self.push(Op::PickPerRow { a, idx }, vec![m], values, false))
    }

    /// Sum of all elements, producing a scalar (shape []).
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut s = F::zero();
        for &v in self.values(a) {
            s += v;
        }
        self.push(Op::SumAll { a }, vec![], vec![s], false)
    }

    /// Masked mean over axis 0 of a [n, d] tensor: rows where `mask` is
    /// nonzero are averaged; the divisor counts unmasked rows only.
    /// `axis == 1` pools columns via transpose. An all-masked slice is a
    /// degenerate input and is rejected.
    pub fn mean_pool(&mut self, a: TensorId, axis: usize, mask: &[bool]) -> Result<TensorId> {
        match axis {
            0 => self.mean_rows(a, mask),
            1 => {
                let t = self.transpose(a)?;
                self.mean_rows(t, mask)
            }
            _ => Err(shape_err(format!("mean_pool: axis {axis} not supported"))),
        }
    }

    fn mean_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "mean_pool")?;
        if mask.len() != m {
            return Err(shape_err(format!(
                "mean_pool: mask length {} does not match {m} rows",
                mask.len()
            )));
        }
        let keep: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if keep.is_empty() {
            return Err(shape_err("mean_pool: every position is masked".into()));
        }
        let av = self.values(a);
        let inv = F::from_f64(1.0 / keep.len() as f64);
        let mut out = vec![F::zero(); n];
        for &i in &keep {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        Ok(self.push(Op::MeanRows { a, keep }, vec![n], out, false))
    }

    /// Concatenate along axis 0. Operands must agree on all trailing axes,
    /// so vectors concatenate to a longer vector and matrices stack rows.
    pub fn concat0(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat0: no operands".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(format!(
                    "concat0: operand shape {:?} incompatible with {:?}",
                    s,
                    self.shape(parts[0])
                )));
            }
            dim0 += s[0];
        }
        let mut values = Vec::with_capacity(dim0 * numel(&tail).max(1));
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        Ok(self.push(Op::Concat0 { parts: parts.to_vec() }, shape, values, false))
    }

    /// Concatenate 2-D tensors along axis 1 (columns).
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols: no operands".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(shape_err(format!(
                    "concat_cols: row counts disagree: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.values(p);
                values.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![m, total], values, false))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(shape_err(format!(
                "slice_cols: range {start}..{} exceeds width {n}",
                start + len
            )));
        }
        let av = self.values(a);
        let mut values = Vec::with_capacity(m * len);
        for i in 0..m {
            values.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start, len }, vec![m, len], values, false))
    }

    /// Rows [start, start+len) of a 2-D tensor.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(shape_err(format!(
                "slice_rows: range {start}..{} exceeds {m} rows",
                start + len
            )));
        }
        let values = self.values(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(Op::SliceRows { a, start, len }, vec![len, n], values, false))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(shape_err(format!(
                "reshape: {:?} incompatible with {:?}",
                self.shape(a),
                shape
            )));
        }
        let values = self.values(a).to_vec();
        Ok(self.push(Op::Reshape { a }, shape, values, false))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "layer_norm: gain {:?} / bias {:?} do not match row width of {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.values(x);
        let gv = self.values(gain);
        let bv = self.values(bias);
        let epsf = F::from_f64(eps);
        let invn = F::from_f64(1.0 / n as f64);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mu = F::zero();
            for &v in row {
                mu += v;
            }
            mu *= invn;
            let mut var = F::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var *= invn;
            let inv_sd = F::one() / (var + epsf).sqrt();
            for j in 0..n {
                out.push((row[j] - mu) * inv_sd * gv[j] + bv[j]);
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gain, bias, eps }, vec![m, n], out, false))
    }

    /// Row lookup into an embedding table [V, d]; out-of-range ids are
    /// rejected.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(format!(
                "embed: token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let tv = self.values(table);
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            values.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(Op::EmbedRows { table, ids: ids.to_vec() }, vec![ids.len(), d], values, false))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets` over the
    /// positions where `mask` is nonzero, computed in the numerically stable
    /// max(x,0) - x*t + ln(1+exp(-|x|)) form. Produces a scalar.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: Vec<F>, mask: Vec<F>) -> Result<TensorId> {
        let n = numel(self.shape(logits));
        if targets.len() != n || mask.len() != n {
            return Err(shape_err(format!(
                "bce_with_logits: logits {:?} vs {} targets / {} mask entries",
                self.shape(logits),
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m != F::zero()).count();
        if count == 0 {
            return Err(shape_err("bce_with_logits: every position is masked".into()));
        }
        let lv = self.values(logits);
        let mut total = F::zero();
        for i in 0..n {
            if mask[i] == F::zero() {
                continue;
            }
            let x = lv[i];
            let t = targets[i];
            total += x.max(F::zero()) - x * t + (F::one() + (-x.abs()).exp()).ln();
        }
        let mean = total * F::from_f64(1.0 / count as f64);
        Ok(self.push(Op::BceWithLogits { logits, targets, mask }, vec![], vec![mean], false))
    }

    // ── backward ────────────────────────────────────────────────────

    fn accum(&self, pass: &mut [Option<Vec<F>>], id: TensorId, delta: &[F], fault: F) {
        if !self.nodes[id.0].on_grad_path {
            return;
        }
        let g = pass[id.0].get_or_insert_with(|| vec![F::zero(); self.nodes[id.0].values.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi += di * fault;
        }
    }

    /// Reverse sweep from a scalar loss. Each call propagates a fresh unit
    /// seed and adds the result into the persistent `grad` buffers, so
    /// repeated calls without a reset accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(shape_err("backward: empty tape".into()));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(shape_err(format!(
                "backward: root must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pass: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].on_grad_path {
                pass[i] = None;
                continue;
            }
            let Some(go) = pass[i].take() else { continue };
            self.apply_adjoint(i, &go, &mut pass);
            let node = &mut self.nodes[i];
            let g = node.grad.get_or_insert_with(|| vec![F::zero(); node.values.len()]);
            for (gi, &di) in g.iter_mut().zip(&go) {
                *gi += di;
            }
        }
        Ok(())
    }

    fn apply_adjoint(&self, i: usize, go: &[F], pass: &mut [Option<Vec<F>>]) {
        let op = &self.nodes[i].op;
        let fault = if self.fault == Some(op.name()) { F::from_f64(1.5) } else { F::one() };
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let da = mm_bt(go, self.values(*b), m, n, k);
                let db = mm_at(self.values(*a), go, m, k, n);
                self.accum(pass, *a, &da, fault);
                self.accum(pass, *b, &db, fault);
            }
            Op::Transpose { a } => {
                let (n, m) = (self.shape(TensorId(i))[0], self.shape(TensorId(i))[1]);
                let mut da = vec![F::zero(); m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = go[r * m + c];
                    }
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::Add { a, b } => {
                self.accum(pass, *a, go, fault);
                self.accum(pass, *b, go, fault);
            }
            Op::Sub { a, b } => {
                self.accum(pass, *a, go, fault);
                let neg: Vec<F> = go.iter().map(|&g| -g).collect();
                self.accum(pass, *b, &neg, fault);
            }
            Op::Mul { a, b } => {
                let da: Vec<F> = go.iter().zip(self.values(*b)).map(|(&g, &v)| g * v).collect();
                let db: Vec<F> = go.iter().zip(self.values(*a)).map(|(&g, &v)| g * v).collect();
                self.accum(pass, *a, &da, fault);
                self.accum(pass, *b, &db, fault);
            }
            Op::AddBias { a, bias } => {
                self.accum(pass, *a, go, fault);
                let n = self.shape(*bias)[0];
                let m = go.len() / n;
                let mut db = vec![F::zero(); n];
                for r in 0..m {
                    for j in 0..n {
                        db[j] += go[r * n + j];
                    }
                }
                self.accum(pass, *bias, &db, fault);
            }
            Op::Scale { a, c } => {
                let cf = F::from_f64(*c);
                let da: Vec<F> = go.iter().map(|&g| g * cf).collect();
                self.accum(pass, *a, &da, fault);
            }
            Op::Tanh { a } => {
                let y = &self.nodes[i].values;
                let da: Vec<F> = go
                    .iter()
                    .zip(y)
                    .map(|(&g, &yi)| g * (F::one() - yi * yi))
                    .collect();
                self.accum(pass, *a, &da, fault);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[i].values;
                let da: Vec<F> = go
                    .iter()
                    .zip(y)
                    .map(|(&g, &yi)| g * yi * (F::one() - yi))
                    .collect();
                self.accum(pass, *a, &da, fault);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = (self.shape(TensorId(i))[0], self.shape(TensorId(i))[1]);
                let y = &self.nodes[i].values;
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &go[r * n..(r + 1) * n];
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::LogSoftmaxRows { a } => {
                let (m, n) = (self.shape(TensorId(i))[0], self.shape(TensorId(i))[1]);
                let y = &self.nodes[i].values;
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &go[r * n..(r + 1) * n];
                    let mut gsum = F::zero();
                    for j in 0..n {
                        gsum += gr[j];
                    }
                    for j in 0..n {
                        da[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::PickPerRow { a, idx } => {
                let n = self.shape(*a)[1];
                let mut da = vec![F::zero(); self.values(*a).len()];
                for (r, &j) in idx.iter().enumerate() {
                    da[r * n + j] = go[r];
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::SumAll { a } => {
                let da = vec![go[0]; self.values(*a).len()];
                self.accum(pass, *a, &da, fault);
            }
            Op::MeanRows { a, keep } => {
                let n = self.shape(*a)[1];
                let inv = F::from_f64(1.0 / keep.len() as f64);
                let mut da = vec![F::zero(); self.values(*a).len()];
                for &r in keep {
                    for j in 0..n {
                        da[r * n + j] = go[j] * inv;
                    }
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::Concat0 { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.values(p).len();
                    let slice = go[offset..offset + len].to_vec();
                    self.accum(pass, p, &slice, fault);
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.shape(TensorId(i))[0];
                let total = self.shape(TensorId(i))[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&go[r * total + start..r * total + start + w]);
                    }
                    self.accum(pass, p, &dp, fault);
                    start += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    for j in 0..*len {
                        da[r * n + start + j] = go[r * len + j];
                    }
                }
                self.accum(pass, *a, &da, fault);
            }
            Op::SliceRows { a, start, len } => {
                let n = self.shape(*a)[1];
                let mut da = vec![F::zero(); self.values(*a).len()];
                da[start * n..(start + len) * n].copy_from_slice(go);
                self.accum(pass, *a, &da, fault);
            }
            Op::Reshape { a } => {
                self.accum(pass, *a, go, fault);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.values(*x);
                let gv = self.values(*gain);
                let epsf = F::from_f64(*eps);
                let invn = F::from_f64(1.0 / n as f64);
                let mut dx = vec![F::zero(); m * n];
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &go[r * n..(r + 1) * n];
                    let mut mu = F::zero();
                    for &v in row {
                        mu += v;
                    }
                    mu *= invn;
                    let mut var = F::zero();
                    for &v in row {
                        var += (v - mu) * (v - mu);
                    }
                    var *= invn;
                    let inv_sd = F::one() / (var + epsf).sqrt();
                    // h = g ⊙ dL/dy; dx = (h - mean(h) - x̂·mean(h⊙x̂)) / sd
                    let mut h_mean = F::zero();
                    let mut hx_mean = F::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mu) * inv_sd;
                        let h = gr[j] * gv[j];
                        h_mean += h;
                        hx_mean += h * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    h_mean *= invn;
                    hx_mean *= invn;
                    for j in 0..n {
                        let xhat = (row[j] - mu) * inv_sd;
                        let h = gr[j] * gv[j];
                        dx[r * n + j] = (h - h_mean - xhat * hx_mean) * inv_sd;
                    }
                }
                self.accum(pass, *x, &dx, fault);
                self.accum(pass, *gain, &dgain, fault);
                self.accum(pass, *bias, &dbias, fault);
            }
            Op::EmbedRows { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![F::zero(); self.values(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += go[r * d + j];
                    }
                }
                self.accum(pass, *table, &dt, fault);
            }
            Op::BceWithLogits { logits, targets, mask } => {
                let lv = self.values(*logits);
                let count = mask.iter().filter(|&&m| m != F::zero()).count();
                let inv = F::from_f64(1.0 / count as f64);
                let one = F::one();
                let da: Vec<F> = lv
                    .iter()
                    .zip(targets.iter().zip(mask.iter()))
                    .map(|(&x, (&t, &m))| {
                        if m == F::zero() {
                            F::zero()
                        } else {
                            go[0] * (one / (one + (-x).exp()) - t) * inv
                        }
                    })
                    .collect();
                self.accum(pass, *logits, &da, fault);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut t = tape();
        let eye = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let c = t.matmul(eye, b).unwrap();
        assert_eq!(t.values(c), t.values(b));
    }

    #[test]
    fn matmul_zeros_zero_grad() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], true).unwrap();
        let z = t.zeros(vec![3, 2]);
        let c = t.matmul(a, z).unwrap();
        assert!(t.values(c).iter().all(|&v| v == 0.0));
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert!(t.grad(a).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = tape();
        let a = t.zeros(vec![3, 4]);
        let b = t.zeros(vec![5, 2]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut t = tape();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        for &v in t.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = t.constant(vec![0.0, 2.0f64.ln()], vec![2]).unwrap();
        let sy = t.softmax(y, 0).unwrap();
        assert!((t.values(sy)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.values(sy)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut t = tape();
        let x = t
            .constant(vec![3.0, -50.0, 0.2, 1e3, 999.0, 998.5], vec![2, 3])
            .unwrap();
        let s = t.softmax(x, 1).unwrap();
        let v = t.values(s);
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_empty_axis_rejected() {
        let mut t = tape();
        let x = t.constant(vec![], vec![2, 0]).unwrap();
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn elementwise_analytic_points() {
        let mut t = tape();
        let z = t.constant(vec![0.0], vec![1]).unwrap();
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.values(th)[0], 0.0);
        assert_eq!(t.values(sg)[0], 0.5);
    }

    #[test]
    fn mean_pool_constant_and_masked() {
        let mut t = tape();
        let c = t.constant(vec![7.0; 4], vec![4, 1]).unwrap();
        let m = t.mean_pool(c, 0, &[true; 4]).unwrap();
        assert_eq!(t.values(m), &[7.0]);

        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3, 1]).unwrap();
        let p = t.mean_pool(x, 0, &[true, true, false]).unwrap();
        assert_eq!(t.values(p), &[1.5]);

        assert!(t.mean_pool(x, 0, &[false, false, false]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape();
        let x = t.leaf(vec![0.3, -1.0, 2.0], vec![3], true).unwrap();
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut t = tape();
        let x = t.leaf(vec![1.5], vec![1, 1], true).unwrap();
        let y = t.matmul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_nonscalar_rejected_and_accumulates() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(t.backward(x).is_err());
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_positions_get_zero_gradient() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![4, 1], true).unwrap();
        let p = t.mean_pool(x, 0, &[true, false, true, false]).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0], vec![2, 1]).unwrap();
        let cc = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.values(cc), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = t.slice_cols(cc, 0, 2).unwrap();
        assert_eq!(t.values(back), t.values(a));

        let v1 = t.constant(vec![1.0], vec![1]).unwrap();
        let v2 = t.constant(vec![2.0, 3.0], vec![2]).unwrap();
        let cv = t.concat0(&[v1, v2]).unwrap();
        assert_eq!(t.shape(cv), &[3]);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let mut t = tape();
        let table = t.leaf(vec![0.0; 6], vec![3, 2], true).unwrap();
        assert!(t.embed(table, &[3]).is_err());
        let e = t.embed(table, &[1, 1]).unwrap();
        assert_eq!(t.shape(e), &[2, 2]);
    }

    #[test]
    fn scalar_shape_is_empty() {
        let mut t = tape();
        let x = t.constant(vec![2.0, 3.0], vec![2]).unwrap();
        let s = t.sum(x);
        assert_eq!(t.shape(s), &[] as &[usize]);
        assert_eq!(t.values(s), &[5.0]);
    }
}
