//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward calls record one node per operation and evaluate eagerly; a single
//! reverse sweep over the tape accumulates gradients, so a scalar root
//! populates every reachable leaf exactly once. The tape is single-writer:
//! one tape per training step, confined to one thread.

use crate::error::{MoweError, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy { x: Var, s: Var },
    Element { v: Var, idx: usize },
    AddBias { x: Var, b: Var },
    Gelu(Var),
    SoftmaxRows(Var),
    KeepTop1 { v: Var, kept: usize },
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols { x: Var, start: usize, width: usize },
    SliceRows { x: Var, start: usize, count: usize },
    PadRows(Var),
    Reshape(Var),
    InterpCols { x: Var },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    Embedding { table: Var, ids: Vec<u32> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    EntropyNeg(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulTransB(..) => "matmul_transb",
        Op::Add(..) => "add",
        Op::AddN(..) => "add_n",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::ScaleBy { .. } => "scale_by",
        Op::Element { .. } => "element",
        Op::AddBias { .. } => "add_bias",
        Op::Gelu(..) => "gelu",
        Op::SoftmaxRows(..) => "softmax",
        Op::KeepTop1 { .. } => "keep_top1",
        Op::MeanRows(..) => "mean_over_sequence",
        Op::Sum(..) => "sum",
        Op::ConcatCols(..) => "concat_feature",
        Op::ConcatRows(..) => "concat_sequence",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::PadRows { .. } => "pad_rows",
        Op::Reshape(..) => "reshape",
        Op::InterpCols { .. } => "linear_interpolate_features",
        Op::Conv1d { .. } => "conv1d",
        Op::Embedding { .. } => "embedding",
        Op::LayerNorm { .. } => "layer_norm",
        Op::EntropyNeg(..) => "entropy_neg",
        Op::CrossEntropyRows { .. } => "cross_entropy",
    }
}

struct Node {
    data: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── raw matrix kernels ──────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], ikj order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ (row-dot-row).
fn mm_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[m×n] = A[p×m]ᵀ · B[p×n].
fn mm_ta(a: &[f64], b: &[f64], p_rows: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..p_rows {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            orow[j] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Shape of a node viewed as a matrix: 1-D `[n]` counts as one row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Tensor, needs_grad: bool, label: Option<&str>) -> Var {
        self.push(data, Op::Leaf, needs_grad, label.map(|s| s.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].data
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert!(self.nodes[v.0].data.is_scalar());
        self.nodes[v.0].data.data()[0]
    }

    /// Gradient accumulated at `v`, if the last backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.data.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, data: Tensor, op: Op, needs_grad: bool, label: Option<String>) -> Var {
        self.nodes.push(Node {
            data,
            grad: None,
            op,
            needs_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, data: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(data, op, needs, None)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data.data()
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        as_matrix(self.shape(v)).ok_or_else(|| {
            MoweError::invalid(format!("{op}: expected vector or matrix, got {:?}", self.shape(v)))
        })
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(MoweError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.record(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; `b` is `[n×k]`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_transb")?;
        let (n, k2) = self.mat_dims(b, "matmul_transb")?;
        if k != k2 {
            return Err(MoweError::ShapeMismatch {
                op: "matmul_transb",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm_tb(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.record(t, Op::MatMulTransB(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MoweError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(t, Op::Add(a, b), &[a, b]))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MoweError::invalid("add_n: empty operand list"))?;
        let shape = self.shape(first).to_vec();
        let mut data = self.data(first).to_vec();
        for &p in &parts[1..] {
            if self.shape(p) != shape.as_slice() {
                return Err(MoweError::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
            for (acc, v) in data.iter_mut().zip(self.data(p)) {
                *acc += v;
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.record(t, Op::AddN(parts.to_vec()), parts))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("scale shape");
        self.record(t, Op::Scale(a, c), &[a])
    }

    /// Elementwise `a + c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("add_const shape");
        self.record(t, Op::AddConst(a), &[a])
    }

    /// Scale a tensor by a scalar-valued node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].data.is_scalar() {
            return Err(MoweError::invalid(format!(
                "scale_by: scale must be scalar, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(t, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Extract element `idx` of a vector as a scalar node.
    pub fn element(&mut self, v: Var, idx: usize) -> Result<Var> {
        let n = self.nodes[v.0].data.numel();
        if idx >= n {
            return Err(MoweError::IndexOutOfRange {
                what: "element",
                index: idx,
                len: n,
            });
        }
        let t = Tensor::scalar(self.data(v)[idx]);
        Ok(self.record(t, Op::Element { v, idx }, &[v]))
    }

    /// Row-broadcast bias add: `x[S×d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "add_bias")?;
        if self.shape(b) != [cols] {
            return Err(MoweError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] += bv[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(t, Op::AddBias { x, b }, &[x, b]))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C0 * (v + GELU_C1 * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("gelu shape");
        self.record(t, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax with max-subtraction; a 1-D input is one row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "softmax")?;
        if cols == 0 {
            return Err(MoweError::invalid("softmax: empty vector"));
        }
        let data = softmax_rows_raw(self.data(x), rows, cols);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.record(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Zero all but the argmax entry of a vector. Ties keep the lowest index.
    /// Gradient flows only through the kept entry.
    pub fn keep_top1(&mut self, v: Var) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(MoweError::invalid(format!(
                "keep_top1: expected non-empty vector, got {shape:?}"
            )));
        }
        let src = self.data(v);
        let mut kept = 0;
        for (i, &x) in src.iter().enumerate() {
            if x > src[kept] {
                kept = i;
            }
        }
        let mut data = vec![0.0; src.len()];
        data[kept] = src[kept];
        let t = Tensor::new(shape, data)?;
        Ok(self.record(t, Op::KeepTop1 { v, kept }, &[v]))
    }

    /// Column means: `[S×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "mean_over_sequence")?;
        if rows == 0 {
            return Err(MoweError::invalid("mean_over_sequence: zero rows"));
        }
        let src = self.data(x);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                data[j] += src[r * cols + j];
            }
        }
        for v in data.iter_mut() {
            *v /= rows as f64;
        }
        let t = Tensor::new(vec![1, cols], data)?;
        Ok(self.record(t, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.data(x).iter().sum());
        self.record(t, Op::Sum(x), &[x])
    }

    /// Concatenate along the feature (column) dimension.
    pub fn concat_feature(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat_dims(a, "concat_feature")?;
        let (rb, cb) = self.mat_dims(b, "concat_feature")?;
        if ra != rb {
            return Err(MoweError::ShapeMismatch {
                op: "concat_feature",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.record(t, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Concatenate along the sequence (row) dimension.
    pub fn concat_sequence(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat_dims(a, "concat_sequence")?;
        let (rb, cb) = self.mat_dims(b, "concat_sequence")?;
        if ca != cb {
            return Err(MoweError::ShapeMismatch {
                op: "concat_sequence",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let t = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.record(t, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "slice_cols")?;
        if start + width > cols {
            return Err(MoweError::invalid(format!(
                "slice_cols: {}..{} out of range for {} columns",
                start,
                start + width,
                cols
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::new(vec![rows, width], data)?;
        Ok(self.record(t, Op::SliceCols { x, start, width }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "slice_rows")?;
        if start + count > rows {
            return Err(MoweError::invalid(format!(
                "slice_rows: {}..{} out of range for {} rows",
                start,
                start + count,
                rows
            )));
        }
        let data = self.data(x)[start * cols..(start + count) * cols].to_vec();
        let t = Tensor::new(vec![count, cols], data)?;
        Ok(self.record(t, Op::SliceRows { x, start, count }, &[x]))
    }

    /// Zero-pad rows at the end up to `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "pad_rows")?;
        if total < rows {
            return Err(MoweError::invalid(format!(
                "pad_rows: target {total} smaller than current {rows}"
            )));
        }
        let mut data = self.data(x).to_vec();
        data.resize(total * cols, 0.0);
        let t = Tensor::new(vec![total, cols], data)?;
        Ok(self.record(t, Op::PadRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.numel() {
            return Err(MoweError::invalid(format!(
                "reshape: {:?} cannot view as {:?}",
                self.shape(x),
                shape
            )));
        }
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        Ok(self.record(t, Op::Reshape(x), &[x]))
    }

    /// Per-row 1-D linear interpolation from the source column grid to
    /// `dst` columns; endpoints preserved.
    pub fn interpolate_features(&mut self, x: Var, dst: usize) -> Result<Var> {
        let (rows, src_cols) = self.mat_dims(x, "linear_interpolate_features")?;
        if src_cols == 0 || dst == 0 {
            return Err(MoweError::invalid(
                "linear_interpolate_features: zero-width input or output",
            ));
        }
        let src = self.data(x);
        let mut data = vec![0.0; rows * dst];
        for r in 0..rows {
            let irow = &src[r * src_cols..(r + 1) * src_cols];
            let orow = &mut data[r * dst..(r + 1) * dst];
            for (j, out) in orow.iter_mut().enumerate() {
                let (i0, w) = interp_index(j, src_cols, dst);
                *out = if w == 0.0 {
                    irow[i0]
                } else {
                    (1.0 - w) * irow[i0] + w * irow[i0 + 1]
                };
            }
        }
        let t = Tensor::new(vec![rows, dst], data)?;
        Ok(self.record(t, Op::InterpCols { x }, &[x]))
    }

    /// 1-D convolution over the sequence dimension. `w` is
    /// `[kernel·d_in × d_out]` (window rows flattened), `b` is `[d_out]`.
    /// Zero padding; output rows = (pad_left + S + pad_right − kernel)/stride + 1.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (s, d_in) = self.mat_dims(x, "conv1d")?;
        let (wr, d_out) = self.mat_dims(w, "conv1d")?;
        if wr != kernel * d_in {
            return Err(MoweError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![kernel * d_in, d_out],
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [d_out] {
            return Err(MoweError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![d_out],
                rhs: self.shape(b).to_vec(),
            });
        }
        if stride == 0 || kernel == 0 {
            return Err(MoweError::invalid("conv1d: zero kernel or stride"));
        }
        let padded = pad_left + s + pad_right;
        if padded < kernel {
            return Err(MoweError::invalid(format!(
                "conv1d: padded length {padded} shorter than kernel {kernel}"
            )));
        }
        let n_out = (padded - kernel) / stride + 1;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut data = vec![0.0; n_out * d_out];
        for o in 0..n_out {
            let orow = &mut data[o * d_out..(o + 1) * d_out];
            orow.copy_from_slice(bd);
            for u in 0..kernel {
                let t = o * stride + u;
                if t < pad_left || t >= pad_left + s {
                    continue;
                }
                let xrow = &xd[(t - pad_left) * d_in..(t - pad_left + 1) * d_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(u * d_in + ci) * d_out..(u * d_in + ci + 1) * d_out];
                    for j in 0..d_out {
                        orow[j] += xv * wrow[j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n_out, d_out], data)?;
        Ok(self.record(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad_left,
            },
            &[x, w, b],
        ))
    }

    /// Row lookup: `table[V×d]` gathered at `ids` -> `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, dim) = self.mat_dims(table, "embedding")?;
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(MoweError::IndexOutOfRange {
                    what: "embedding id",
                    index: id,
                    len: vocab,
                });
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.record(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.mat_dims(x, "layer_norm")?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(MoweError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![cols],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                orow[j] = gd[j] * (row[j] - mu) * inv + bd[j];
            }
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.record(t, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    /// `−Σ v·ln v` with the 0·ln 0 = 0 convention. Scalar output.
    pub fn entropy_neg(&mut self, v: Var) -> Var {
        let acc: f64 = self
            .data(v)
            .iter()
            .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
            .sum();
        let t = Tensor::scalar(acc);
        self.record(t, Op::EntropyNeg(v), &[v])
    }

    /// Mean cross-entropy over masked rows of `logits[T×V]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(MoweError::invalid(format!(
                "cross_entropy: {} logit rows but {} targets / {} mask entries",
                rows,
                targets.len(),
                mask.len()
            )));
        }
        let n_masked = mask.iter().filter(|m| **m).count();
        if n_masked == 0 {
            return Err(MoweError::invalid("cross_entropy: empty loss mask"));
        }
        let src = self.data(logits);
        let mut acc = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let y = targets[t] as usize;
            if y >= vocab {
                return Err(MoweError::IndexOutOfRange {
                    what: "target token",
                    index: y,
                    len: vocab,
                });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        let t = Tensor::scalar(acc / n_masked as f64);
        Ok(self.record(
            t,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients of earlier backward
    /// passes on this tape are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].data.is_scalar() {
            return Err(MoweError::invalid(format!(
                "backward: root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(Var(i), &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let numel = node.data.numel();
        let buf = node.grad.get_or_insert_with(|| vec![0.0; numel]);
        for (acc, c) in buf.iter_mut().zip(contrib) {
            *acc += c;
        }
    }

    fn backprop(&mut self, out: Var, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(a)).unwrap();
                let n = as_matrix(self.shape(b)).unwrap().1;
                let da = mm_tb(g, self.data(b), m, n, k);
                let db = mm_ta(self.data(a), g, m, k, n);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::MatMulTransB(a, b) => {
                let (m, k) = as_matrix(self.shape(a)).unwrap();
                let n = as_matrix(self.shape(b)).unwrap().0;
                let da = mm(g, self.data(b), m, n, k);
                let db = mm_ta(g, self.data(a), m, n, k);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddN(ref parts) => {
                for &p in parts {
                    self.add_grad(p, g);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(a, &da);
            }
            Op::AddConst(a) => {
                self.add_grad(a, g);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.data(s)[0];
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g.iter().zip(self.data(x)).map(|(gv, xv)| gv * xv).sum();
                self.add_grad(x, &dx);
                self.add_grad(s, &[ds]);
            }
            Op::Element { v, idx } => {
                let mut dv = vec![0.0; self.nodes[v.0].data.numel()];
                dv[idx] = g[0];
                self.add_grad(v, &dv);
            }
            Op::AddBias { x, b } => {
                let (rows, cols) = as_matrix(self.shape(x)).unwrap();
                self.add_grad(x, g);
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] += g[r * cols + j];
                    }
                }
                self.add_grad(b, &db);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let u = GELU_C0 * (v + GELU_C1 * v * v * v);
                        let t = u.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v);
                        gv * d
                    })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = as_matrix(self.shape(x)).unwrap();
                let y = self.data(out);
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::KeepTop1 { v, kept } => {
                let mut dv = vec![0.0; self.nodes[v.0].data.numel()];
                dv[kept] = g[kept];
                self.add_grad(v, &dv);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = as_matrix(self.shape(x)).unwrap();
                let inv = 1.0 / rows as f64;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dx[r * cols + j] = g[j] * inv;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.0].data.numel()];
                self.add_grad(x, &dx);
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = as_matrix(self.shape(a)).unwrap();
                let cb = as_matrix(self.shape(b)).unwrap().1;
                let cols = ca + cb;
                let mut da = vec![0.0; rows * ca];
                let mut db = vec![0.0; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * cols..r * cols + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * cols + ca..(r + 1) * cols]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].data.numel();
                self.add_grad(a, &g[..na]);
                let db = g[na..].to_vec();
                self.add_grad(b, &db);
            }
            Op::SliceCols { x, start, width } => {
                let (rows, cols) = as_matrix(self.shape(x)).unwrap();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.add_grad(x, &dx);
            }
            Op::SliceRows { x, start, count } => {
                let (_, cols) = as_matrix(self.shape(x)).unwrap();
                let mut dx = vec![0.0; self.nodes[x.0].data.numel()];
                dx[start * cols..(start + count) * cols].copy_from_slice(g);
                self.add_grad(x, &dx);
            }
            Op::PadRows(x) => {
                let n = self.nodes[x.0].data.numel();
                self.add_grad(x, &g[..n]);
            }
            Op::Reshape(x) => {
                self.add_grad(x, g);
            }
            Op::InterpCols { x } => {
                let (rows, src_cols) = as_matrix(self.shape(x)).unwrap();
                let dst = as_matrix(self.shape(out)).unwrap().1;
                let mut dx = vec![0.0; rows * src_cols];
                for r in 0..rows {
                    for j in 0..dst {
                        let (i0, w) = interp_index(j, src_cols, dst);
                        let gv = g[r * dst + j];
                        if w == 0.0 {
                            dx[r * src_cols + i0] += gv;
                        } else {
                            dx[r * src_cols + i0] += (1.0 - w) * gv;
                            dx[r * src_cols + i0 + 1] += w * gv;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad_left,
            } => {
                let (s, d_in) = as_matrix(self.shape(x)).unwrap();
                let d_out = as_matrix(self.shape(w)).unwrap().1;
                let n_out = as_matrix(self.shape(out)).unwrap().0;
                let xd = self.data(x).to_vec();
                let wd = self.data(w).to_vec();
                let mut dx = vec![0.0; s * d_in];
                let mut dw = vec![0.0; kernel * d_in * d_out];
                let mut db = vec![0.0; d_out];
                for o in 0..n_out {
                    let grow = &g[o * d_out..(o + 1) * d_out];
                    for j in 0..d_out {
                        db[j] += grow[j];
                    }
                    for u in 0..kernel {
                        let t = o * stride + u;
                        if t < pad_left || t >= pad_left + s {
                            continue;
                        }
                        let xr = t - pad_left;
                        for ci in 0..d_in {
                            let xv = xd[xr * d_in + ci];
                            let wrow = &wd[(u * d_in + ci) * d_out..(u * d_in + ci + 1) * d_out];
                            let mut acc = 0.0;
                            for j in 0..d_out {
                                acc += grow[j] * wrow[j];
                                dw[(u * d_in + ci) * d_out + j] += xv * grow[j];
                            }
                            dx[xr * d_in + ci] += acc;
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::Embedding { table, ref ids } => {
                let (_, dim) = as_matrix(self.shape(table)).unwrap();
                let mut dt = vec![0.0; self.nodes[table.0].data.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..dim {
                        dt[id * dim + j] += g[t * dim + j];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, cols) = as_matrix(self.shape(x)).unwrap();
                let xd = self.data(x);
                let gd = self.data(gamma);
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mu = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * gd[j];
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * gd[j];
                        dr[j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::EntropyNeg(v) => {
                let dv: Vec<f64> = self
                    .data(v)
                    .iter()
                    .map(|&x| if x > 0.0 { -(x.ln() + 1.0) * g[0] } else { 0.0 })
                    .collect();
                self.add_grad(v, &dv);
            }
            Op::CrossEntropyRows {
                logits,
                ref targets,
                ref mask,
            } => {
                let (rows, vocab) = as_matrix(self.shape(logits)).unwrap();
                let src = self.data(logits);
                let n_masked = mask.iter().filter(|m| **m).count() as f64;
                let scale = g[0] / n_masked;
                let mut dl = vec![0.0; rows * vocab];
                for t in 0..rows {
                    if !mask[t] {
                        continue;
                    }
                    let row = &src[t * vocab..(t + 1) * vocab];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let dr = &mut dl[t * vocab..(t + 1) * vocab];
                    for j in 0..vocab {
                        dr[j] = (row[j] - m).exp() / z * scale;
                    }
                    dr[targets[t] as usize] -= scale;
                }
                self.add_grad(logits, &dl);
            }
        }
    }

    /// First node holding a non-finite value, described by its label or op.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.data.all_finite() {
                None
            } else {
                Some(match &node.label {
                    Some(l) => format!("{l} (node {i})"),
                    None => format!("{} (node {i})", op_name(&node.op)),
                })
            }
        })
    }
}

fn interp_index(j: usize, src: usize, dst: usize) -> (usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0.0);
    }
    let p = j as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let i0 = p.floor() as usize;
    if i0 >= src - 1 {
        (src - 1, 0.0)
    } else {
        (i0, p - i0 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap(), true, None)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_unit_vector_selection() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 0.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![2.0, 5.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        // d/dA sum(A·B) = 1·Bᵀ (row i of dA is the row sums of Bᵀ, i.e. column sums of B... per entry: dA[i,p] = Σ_j B[p,j])
        let mut rng = crate::numerics::rng::Rng::new(11, "mmgrad");
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(vec![3, 4], 1.0, &mut rng), true, None);
        let b = tape.leaf(Tensor::randn(vec![4, 2], 1.0, &mut rng), true, None);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let da = tape.grad(a).unwrap();
        let bd = tape.value(b).clone();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| bd.at2(p, j)).sum();
                assert!((da.at2(i, p) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![4], vec![0.0; 4]);
        let s = tape.softmax(v).unwrap();
        for &x in tape.value(s).data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_inputs_stay_finite() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![2], vec![1000.0, 0.0]);
        let s = tape.softmax(v).unwrap();
        let out = tape.value(s).data();
        assert!(out.iter().all(|x| x.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // oracle: naive formula without max subtraction
        let input: [f64; 3] = [1.0, 2.0, 3.0];
        let z: f64 = input.iter().map(|x| x.exp()).sum();
        let expect: Vec<f64> = input.iter().map(|x| x.exp() / z).collect();
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![3], input.to_vec());
        let s = tape.softmax(v).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = crate::numerics::rng::Rng::new(3, "softmax");
        for _ in 0..200 {
            let n = 1 + rng.below(8);
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let shifted: Vec<f64> = data.iter().map(|x| x + 7.25).collect();
            let mut tape = Tape::new();
            let v = leaf(&mut tape, vec![n], data);
            let vs = leaf(&mut tape, vec![n], shifted);
            let s = tape.softmax(v).unwrap();
            let ss = tape.softmax(vs).unwrap();
            let sum: f64 = tape.value(s).data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            for (a, b) in tape.value(s).data().iter().zip(tape.value(ss).data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_is_an_error() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![0], vec![]);
        assert!(tape.softmax(v).is_err());
    }

    #[test]
    fn keep_top1_zeroes_rest_and_breaks_ties_low() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, vec![3], vec![0.1, 0.7, 0.2]);
        let k = tape.keep_top1(v).unwrap();
        assert_eq!(tape.value(k).data(), &[0.0, 0.7, 0.0]);

        let t = leaf(&mut tape, vec![2], vec![0.5, 0.5]);
        let kt = tape.keep_top1(t).unwrap();
        assert_eq!(tape.value(kt).data(), &[0.5, 0.0]);
    }

    #[test]
    fn keep_top1_matches_argmax_oracle() {
        let mut rng = crate::numerics::rng::Rng::new(5, "ktop");
        for _ in 0..300 {
            let n = 1 + rng.below(10);
            let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            // brute-force argmax oracle
            let mut best = 0;
            for i in 1..n {
                if data[i] > data[best] {
                    best = i;
                }
            }
            let mut tape = Tape::new();
            let v = leaf(&mut tape, vec![n], data.clone());
            let k = tape.keep_top1(v).unwrap();
            let out = tape.value(k).data();
            assert_eq!(out.iter().filter(|x| **x != 0.0).count(), usize::from(data[best] != 0.0));
            assert_eq!(out[best], data[best]);
        }
    }

    #[test]
    fn mean_rows_examples() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![2, 2], vec![1.0, 3.0, 3.0, 5.0]);
        let m = tape.mean_rows(z).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 2]);
        assert_eq!(tape.value(m).data(), &[2.0, 4.0]);

        let single = leaf(&mut tape, vec![1, 3], vec![4.0, 5.0, 6.0]);
        let ms = tape.mean_rows(single).unwrap();
        assert_eq!(tape.value(ms).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn concat_feature_examples_and_grad_split() {
        let mut tape = Tape::new();
        let empty = leaf(&mut tape, vec![2, 0], vec![]);
        let b = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.concat_feature(empty, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = leaf(&mut tape, vec![2, 1], vec![1.0, 2.0]);
        let y = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let xy = tape.concat_feature(x, y).unwrap();
        assert_eq!(tape.value(xy).data(), &[1.0, 3.0, 2.0, 4.0]);

        // grads split back exactly: weight the concat entries distinctly
        let w = leaf(&mut tape, vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        let prod = tape.matmul(xy, w).unwrap(); // uses all entries
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        let dx = tape.grad(x).unwrap();
        let dy = tape.grad(y).unwrap();
        // d sum / d xy[r,0] = 10+20 = 30, d/d xy[r,1] = 30+40 = 70
        assert_eq!(dx.data(), &[30.0, 30.0]);
        assert_eq!(dy.data(), &[70.0, 70.0]);
    }

    #[test]
    fn concat_sequence_stacks_rows() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.concat_sequence(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let bad = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        assert!(tape.concat_sequence(a, bad).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let mut rng = crate::numerics::rng::Rng::new(8, "catslice");
        let ta = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        let tb = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(ta.clone(), false, None);
        let b = tape.leaf(tb.clone(), false, None);
        let c = tape.concat_feature(a, b).unwrap();
        let back_a = tape.slice_cols(c, 0, 2).unwrap();
        let back_b = tape.slice_cols(c, 2, 4).unwrap();
        assert_eq!(tape.value(back_a), &ta);
        assert_eq!(tape.value(back_b), &tb);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, 8.0, -8.0]);
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 8.0).abs() < 1e-9); // large x asymptote
        assert!(out[2].abs() < 1e-9);
    }

    #[test]
    fn interpolate_identity_and_midpoint() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![0.5, 1.5, -2.0, 3.0]);
        let same = tape.interpolate_features(x, 4).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());

        let pair = leaf(&mut tape, vec![1, 2], vec![0.0, 1.0]);
        let tri = tape.interpolate_features(pair, 3).unwrap();
        assert_eq!(tape.value(tri).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn interpolate_ramp_round_trip() {
        // linear ramps are reproduced exactly by linear interpolation
        let d = 6;
        let ramp: Vec<f64> = (0..d).map(|i| -1.0 + 2.0 * i as f64 / (d - 1) as f64).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, d], ramp.clone());
        let up = tape.interpolate_features(x, 2 * d).unwrap();
        let down = tape.interpolate_features(up, d).unwrap();
        for (a, b) in tape.value(down).data().iter().zip(&ramp) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_and_reshape_round_trip() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let padded = tape.pad_rows(x, 4).unwrap();
        assert_eq!(tape.value(padded).shape(), &[4, 3]);
        assert_eq!(&tape.value(padded).data()[6..], &[0.0; 6]);
        let grouped = tape.reshape(padded, vec![2, 6]).unwrap();
        assert_eq!(tape.value(grouped).shape(), &[2, 6]);
    }

    #[test]
    fn conv1d_kernel_equals_stride_counts_windows() {
        // S=5, kernel=stride=2, pad right to cover: ceil(5/2)=3 windows
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = leaf(&mut tape, vec![2, 1], vec![1.0, 1.0]); // sum of window
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.conv1d(x, w, b, 2, 2, 0, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0, 5.0]);
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        let dt = tape.grad(table).unwrap();
        assert_eq!(dt.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn entropy_neg_conventions() {
        let mut tape = Tape::new();
        let onehot = leaf(&mut tape, vec![4], vec![1.0, 0.0, 0.0, 0.0]);
        let h0 = tape.entropy_neg(onehot);
        assert_eq!(tape.value_scalar(h0), 0.0);

        let v = 0.37;
        let single = leaf(&mut tape, vec![3], vec![0.0, v, 0.0]);
        let h = tape.entropy_neg(single);
        assert!((tape.value_scalar(h) - (-v * v.ln())).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_perfect_logits_floor() {
        let mut tape = Tape::new();
        // near-one-hot logits: huge margin at target
        let logits = leaf(
            &mut tape,
            vec![2, 3],
            vec![100.0, 0.0, 0.0, 0.0, 100.0, 0.0],
        );
        let loss = tape
            .cross_entropy_rows(logits, &[0, 1], &[true, true])
            .unwrap();
        assert!(tape.value_scalar(loss) < 1e-9);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn leaves_without_needs_grad_get_none() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(Tensor::vector(vec![1.0, 2.0]), false, Some("frozen"));
        let live = tape.leaf(Tensor::vector(vec![3.0, 4.0]), true, None);
        let s1 = tape.add(frozen, live).unwrap();
        let s = tape.sum(s1);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_reporting_names_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![f64::NAN]), false, Some("bad.input"));
        let _ = x;
        let msg = tape.first_non_finite().unwrap();
        assert!(msg.contains("bad.input"));
    }
}
