//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every operation is recorded on a [`Tape`] in creation order, so the node
//! list is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep. Operations are 2-D except for row-bias vectors and scalars.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("attention row {0} allows no column")]
    EmptyAllowRow(usize),
    #[error("target id {target} out of range for {vocab} classes")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0} needs at least one row")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Dense boolean matrix, row = attending slot, column = attended slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b).count()
    }

    pub fn allowed(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r)
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherFlat {
        src: Var,
        idx: Vec<usize>,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `c = a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiable iff the tensor was marked with
    /// [`Tensor::with_grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape.clone(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = &self.value(bias).data;
        let mut data = self.value(x).data.clone();
        for r in 0..rows {
            data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b)
                .for_each(|(v, bb)| *v += bb);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape.clone(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * s).collect())?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            (k as isize, 1),
            &self.value(b).data,
            (n as isize, 1),
            0.0,
            &mut data,
        );
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .map(|&x| (GELU_C * (x + 0.044715 * x * x * x)).tanh())
            .collect::<Vec<f64>>();
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&data).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect(),
        )?;
        Ok(self.push(out, Op::Gelu { x: a, tanh: data }, &[a]))
    }

    /// Normalizes each row, then applies the learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat[r * cols + j] = h;
                data[r * cols + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row lookup; the backward pass scatter-adds, so repeated ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Element lookup by flat index into `src`, reshaped to `shape`.
    pub fn gather_flat(&mut self, src: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let s = &self.value(src).data;
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= s.len() {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: s.len(),
                });
            }
            data.push(s[i]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherFlat { src, idx }, &[src]))
    }

    /// Row-wise softmax restricted to the allowed columns. Disallowed entries
    /// are exactly zero and their scores are never read.
    pub fn masked_softmax_rows(&mut self, scores: Var, allow: &BoolMatrix) -> Result<Var> {
        let (rows, cols) = self.dims2(scores, "masked_softmax_rows")?;
        if allow.rows() != rows || allow.cols() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: vec![rows, cols],
                right: vec![allow.rows(), allow.cols()],
            });
        }
        let src = &self.value(scores).data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mask = allow.row(r);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if mask[j] && row[j] > max {
                    max = row[j];
                }
            }
            if !mask.iter().any(|&b| b) {
                return Err(TensorError::EmptyAllowRow(r));
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            let inv = 1.0 / total;
            for j in 0..cols {
                if mask[j] {
                    out[j] *= inv;
                }
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::MaskedSoftmax(scores), &[scores]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![rows, vocab],
                right: vec![targets.len()],
            });
        }
        if rows == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::TargetOutOfRange { target: t, vocab });
        }
        let src = &self.value(logits).data;
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|v| *v /= z);
            total += -(row[t] - max - z.ln());
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: cols,
            });
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows],
                    right: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: rows,
            });
        }
        let data = self.value(x).data[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::matrix(len, cols, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![cols],
                    right: vec![c],
                });
            }
            data.extend_from_slice(&self.value(p).data);
            rows += r;
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Fills `grad` on every differentiable node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 || !lv.shape.iter().all(|&d| d == 1) {
            return Err(TensorError::NotScalar(lv.shape.clone()));
        }
        if !lv.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        if self.needs(v) {
            self.nodes[v.0].value.accumulate_grad(g);
        }
    }

    /// Like [`Tape::acc`] but hands over the buffer when `v` has no gradient yet.
    fn acc_owned(&mut self, v: Var, g: Vec<f64>) {
        if self.needs(v) {
            let t = &mut self.nodes[v.0].value;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
    }

    /// The gradient buffer of `v` for in-place accumulation, zeroed if new.
    /// The flag tells whether it held earlier contributions.
    fn take_grad(&mut self, v: Var) -> (Vec<f64>, bool) {
        let t = &mut self.nodes[v.0].value;
        match t.grad.take() {
            Some(g) => (g, true),
            None => (vec![0.0; t.data.len()], false),
        }
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].value.grad = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::AddRowBias(x, bias) => {
                self.acc(*x, g);
                if self.needs(*bias) {
                    let cols = self.value(*bias).len();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.acc_owned(*bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.value(*b).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.acc_owned(*a, ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(x, y)| x * y)
                        .collect();
                    self.acc_owned(*b, gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.acc_owned(*a, ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                self.acc_owned(*a, ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let n = self.value(*b).shape[1];
                if self.needs(*a) {
                    // dA = G * B^T
                    let (mut ga, held) = self.take_grad(*a);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        &self.value(*b).data,
                        (1, n as isize),
                        if held { 1.0 } else { 0.0 },
                        &mut ga,
                    );
                    self.put_grad(*a, ga);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let (mut gb, held) = self.take_grad(*b);
                    gemm(
                        k,
                        m,
                        n,
                        &self.value(*a).data,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        if held { 1.0 } else { 0.0 },
                        &mut gb,
                    );
                    self.put_grad(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2("transpose").unwrap();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.acc_owned(*a, ga);
            }
            Op::Gelu { x: a, tanh } => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data
                    .iter()
                    .zip(g)
                    .zip(tanh)
                    .map(|((&x, &gy), &t)| {
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.acc_owned(*a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let rows = inv_std.len();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xhat[r * cols + j];
                            gbeta[j] += g[r * cols + j];
                        }
                    }
                    self.acc_owned(*gamma, gg);
                    self.acc_owned(*beta, gbeta);
                }
                if self.needs(*x) {
                    let gam = &self.value(*gamma).data;
                    let mut gx = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = g[r * cols + j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xhat[r * cols + j];
                        }
                        for j in 0..cols {
                            let d = g[r * cols + j] * gam[j];
                            gx[r * cols + j] =
                                inv_std[r] / nf * (nf * d - sum_d - xhat[r * cols + j] * sum_dx);
                        }
                    }
                    self.acc_owned(*x, gx);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let cols = t.shape[1];
                    let mut gt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                    self.acc_owned(*table, gt);
                }
            }
            Op::GatherFlat { src, idx } => {
                if self.needs(*src) {
                    let mut gs = vec![0.0; self.value(*src).len()];
                    for (&i, &gv) in idx.iter().zip(g) {
                        gs[i] += gv;
                    }
                    self.acc_owned(*src, gs);
                }
            }
            Op::MaskedSoftmax(scores) => {
                let y = &self.nodes[i].value;
                let cols = y.shape[1];
                let mut gs = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.data.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gs[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_owned(*scores, gs);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let vocab = probs.len() / rows;
                let s = g[0] / rows as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= s;
                }
                self.acc_owned(*logits, gl);
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (rows, cols) = self.value(*x).dims2("slice_cols").unwrap();
                    let len = g.len() / rows.max(1);
                    let (mut gx, _) = self.take_grad(*x);
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(a, b)| *a += b);
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).shape[0];
                let total = g.len() / rows.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc_owned(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let cols = self.value(*x).shape[1];
                    let (mut gx, _) = self.take_grad(*x);
                    gx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                    self.put_grad(*x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        self.acc(p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Central differences of a scalar program over one leaf.
    fn fd_check<F>(inputs: Vec<Tensor>, program: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = program(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).unwrap().to_vec();
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut tp = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, x)| {
                            let mut x = x.clone();
                            if m == k {
                                x.data_mut()[j] += delta;
                            }
                            tp.leaf(x)
                        })
                        .collect();
                    let l = program(&mut tp, &vs);
                    tp.value(l).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[j] - numeric).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn row_slicing_and_stacking_gradients() {
        let a = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::matrix(2, 3, (0..6).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let worst = fd_check(vec![a, b], |t, v| {
            let top = t.slice_rows(v[0], 1, 2).unwrap();
            let stacked = t.concat_rows(&[top, v[1], v[0]]).unwrap();
            let sq = t.mul(stacked, stacked).unwrap();
            t.sum(sq).unwrap()
        });
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn matmul_identity_and_zero_row() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[&[0.0], &[5.0]]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0]);
        assert_eq!(tape.value(p).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let w = random(&mut rng, 3, 2);
        let err = fd_check(vec![a, b, w], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let q = t.mul(p, v[2]).unwrap();
            t.sum(q).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_equal_scores_split_evenly() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::full(&[1, 6], 0.7));
        let mut allow = BoolMatrix::new(1, 6);
        for c in [0, 2, 3, 5] {
            allow.set(0, c, true);
        }
        let y = tape.masked_softmax_rows(s, &allow).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.0, 0.25, 0.25, 0.0, 0.25]);
    }

    #[test]
    fn softmax_single_allowed_entry_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let s = tape.leaf(random(&mut rng, 3, 4));
        let mut allow = BoolMatrix::new(3, 4);
        allow.set(0, 1, true);
        allow.set(1, 3, true);
        allow.set(2, 0, true);
        let y = tape.masked_softmax_rows(s, &allow).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(v.row(2), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let scores = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]];
        let allow_bits = [[true, false, true], [true, true, false]];
        let mut allow = BoolMatrix::new(2, 3);
        for r in 0..2 {
            for c in 0..3 {
                allow.set(r, c, allow_bits[r][c]);
            }
        }
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[&scores[0], &scores[1]]).unwrap());
        let y = tape.masked_softmax_rows(s, &allow).unwrap();
        for r in 0..2 {
            let z: f64 = (0..3)
                .filter(|&c| allow_bits[r][c])
                .map(|c| scores[r][c].exp())
                .sum();
            for c in 0..3 {
                let expect = if allow_bits[r][c] {
                    scores[r][c].exp() / z
                } else {
                    0.0
                };
                assert!((tape.value(y).row(r)[c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rejects_empty_row() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(&[2, 2]));
        let mut allow = BoolMatrix::new(2, 2);
        allow.set(0, 0, true);
        assert_eq!(
            tape.masked_softmax_rows(s, &allow),
            Err(TensorError::EmptyAllowRow(1))
        );
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        let ce = tape.cross_entropy(l, &[1, 3]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);

        let l = tape.leaf(Tensor::from_rows(&[&[0.0, 80.0, 0.0]]).unwrap());
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce).item() < 1e-30);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = random(&mut rng, 3, 5);
        let targets = [4, 0, 2];
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[t];
        }
        expect /= 3.0;
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let ce = tape.cross_entropy(l, &targets).unwrap();
        assert!((tape.value(ce).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 4]));
        assert_eq!(
            tape.cross_entropy(l, &[4]),
            Err(TensorError::TargetOutOfRange {
                target: 4,
                vocab: 4
            })
        );
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad());
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(v).unwrap(), x.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(tape.backward(v), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unreachable_leaves_keep_no_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[1, 2], 1.0).with_grad());
        let b = tape.leaf(Tensor::full(&[1, 2], 2.0).with_grad());
        let s = tape.sum(a).unwrap();
        let _unused = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn gather_rows_scatter_adds_repeated_ids() {
        let table = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let mut tape = Tape::new();
        let t = tape.leaf(table.with_grad());
        let g = tape.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn elementwise_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        let gamma = random(&mut rng, 1, 4);
        let beta = random(&mut rng, 1, 4);
        let w = random(&mut rng, 3, 4);
        let err = fd_check(vec![x, gamma, beta, w], |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let act = t.gelu(ln).unwrap();
            let b = t.add_row_bias(act, v[2]).unwrap();
            let m = t.mul(b, v[3]).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random(&mut rng, 3, 4);
        let k = random(&mut rng, 5, 4);
        let v = random(&mut rng, 5, 6);
        let table = random(&mut rng, 4, 2);
        let mut allow = BoolMatrix::new(3, 5);
        for (r, c) in [
            (0, 0),
            (0, 3),
            (1, 1),
            (1, 2),
            (1, 4),
            (2, 0),
            (2, 1),
            (2, 2),
        ] {
            allow.set(r, c, true);
        }
        let buckets: Vec<usize> = (0..15).map(|i| (i * 7 % 4) * 2 + 1).collect();
        let err = fd_check(vec![q, k, v, table], |t, vs| {
            let kt = t.transpose(vs[1]).unwrap();
            let s = t.matmul(vs[0], kt).unwrap();
            let s = t.scale(s, 0.5).unwrap();
            let bias = t.gather_flat(vs[3], buckets.clone(), vec![3, 5]).unwrap();
            let s = t.add(s, bias).unwrap();
            let p = t.masked_softmax_rows(s, &allow).unwrap();
            let o = t.matmul(p, vs[2]).unwrap();
            let left = t.slice_cols(o, 0, 2).unwrap();
            let right = t.slice_cols(o, 2, 4).unwrap();
            let cat = t.concat_cols(&[right, left]).unwrap();
            let ce = t.cross_entropy(cat, &[0, 5, 3]).unwrap();
            let sq = t.mul(o, o).unwrap();
            let s2 = t.sum(sq).unwrap();
            let s2 = t.scale(s2, 0.1).unwrap();
            t.add(ce, s2).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::BadLength { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(
                seed in 0u64..10_000,
                rows in 1usize..6,
                cols in 1usize..9,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scores = random(&mut rng, rows, cols);
                let mut allow = BoolMatrix::new(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        allow.set(r, c, rng.random_bool(0.5));
                    }
                    let forced = rng.random_range(0..cols);
                    allow.set(r, forced, true);
                }
                let mut tape = Tape::new();
                let s = tape.leaf(scores);
                let y = tape.masked_softmax_rows(s, &allow).unwrap();
                for r in 0..rows {
                    let row = tape.value(y).row(r);
                    let total: f64 = row.iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    for c in 0..cols {
                        if !allow.get(r, c) {
                            prop_assert_eq!(row[c], 0.0);
                        }
                    }
                }
            }

            #[test]
            fn forward_is_deterministic(seed in 0u64..1000) {
                let run = || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let a = random(&mut rng, 4, 3);
                    let b = random(&mut rng, 3, 5);
                    let mut tape = Tape::new();
                    let va = tape.leaf(a.with_grad());
                    let vb = tape.leaf(b);
                    let m = tape.matmul(va, vb).unwrap();
                    let g = tape.gelu(m).unwrap();
                    let s = tape.sum(g).unwrap();
                    tape.backward(s).unwrap();
                    (tape.value(s).item().to_bits(), tape.grad(va).unwrap().to_vec())
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
