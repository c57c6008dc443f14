//! Dense linear algebra and attention primitives.
//!
//! Storage is row-major `f32`; every inner product accumulates in `f64` in
//! ascending index order and is rounded once. Because each output row of a
//! product depends only on the matching input row, results are bit-identical
//! whether rows are processed one at a time or in a batch.

use std::cell::Cell;
use std::fmt;

use crate::error::{AifError, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

fn charge_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result with the number of multiply-adds that the
/// matrix kernels performed on this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|c| c.replace(0));
    let out = f();
    let used = MACS.with(|c| c.get());
    MACS.with(|c| c.set(before + used));
    (out, used)
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()
    }
}

impl DenseMatrix {
    /// Builds a matrix, rejecting a length mismatch or non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AifError::shape(
                "from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(AifError::Precondition(format!(
                "non-finite entry at index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(values: Vec<f32>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(1, n, values)
    }

    /// Stacks equally wide row slices into a matrix.
    pub fn from_rows<'a>(cols: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut count = 0;
        for r in rows {
            if r.len() != cols {
                return Err(AifError::shape(
                    "from_rows",
                    format!("row {count} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
            count += 1;
        }
        Ok(Self::from_raw(count, cols, data))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&DenseMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(0, 0));
        };
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(AifError::shape(
                "concat_cols",
                format!("{} rows vs {rows}", bad.rows),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[&DenseMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Ok(Self::zeros(0, 0));
        };
        let cols = first.cols;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(AifError::shape(
                "concat_rows",
                format!("{} cols vs {cols}", bad.cols),
            ));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw(data.len() / cols.max(1), cols, data))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }
}

#[inline]
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// `a · b`, or `a · bᵀ` when `transpose_b` is set.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix, transpose_b: bool) -> Result<DenseMatrix> {
    // Work on bᵀ laid out row-major so the inner loop is contiguous.
    let owned;
    let bt = if transpose_b {
        b
    } else {
        owned = b.transpose();
        &owned
    };
    if a.cols != bt.cols {
        return Err(AifError::shape(
            "matmul",
            format!(
                "{}x{} times {}x{}{}",
                a.rows,
                a.cols,
                b.rows,
                b.cols,
                if transpose_b { "ᵀ" } else { "" }
            ),
        ));
    }
    let (m, n) = (a.rows, bt.rows);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot64(ar, bt.row(j)) as f32);
        }
    }
    charge_macs((m * n * a.cols) as u64);
    Ok(DenseMatrix::from_raw(m, n, out))
}

/// Row-wise softmax with max subtraction; exponentials and sums in `f64`.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = Vec::with_capacity(x.data.len());
    let mut exps = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (f64::from(v) - f64::from(max)).exp();
            sum += *e;
        }
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    DenseMatrix::from_raw(x.rows, x.cols, out)
}

/// Attention probabilities `softmax(q·kᵀ / scale)`.
pub fn attention_weights(q: &DenseMatrix, k: &DenseMatrix, scale: f32) -> Result<DenseMatrix> {
    if !(scale > 0.0) {
        return Err(AifError::Precondition(format!(
            "attention scale must be positive, got {scale}"
        )));
    }
    let logits = matmul(q, k, true)?;
    Ok(softmax_rows(&logits.map(|x| x / scale)))
}

/// `softmax(q·kᵀ / scale) · v`.
pub fn scaled_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    scale: f32,
) -> Result<DenseMatrix> {
    if k.rows != v.rows {
        return Err(AifError::shape(
            "scaled_attention",
            format!("{} keys vs {} values", k.rows, v.rows),
        ));
    }
    let p = attention_weights(q, k, scale)?;
    matmul(&p, v, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Affine layer `y = act(x · Wᵀ + bias)` with `weights` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: DenseMatrix, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows {
            return Err(AifError::shape(
                "Layer::new",
                format!("bias {} for {} outputs", bias.len(), weights.rows),
            ));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let w = &self.weights;
        if x.cols != w.cols {
            return Err(AifError::shape(
                "mlp_forward",
                format!("input width {} into layer {}->{}", x.cols, w.cols, w.rows),
            ));
        }
        let mut out = Vec::with_capacity(x.rows * w.rows);
        for i in 0..x.rows {
            let xr = x.row(i);
            for j in 0..w.rows {
                let pre = dot64(xr, w.row(j)) + f64::from(self.bias[j]);
                out.push(self.activation.apply(pre) as f32);
            }
        }
        charge_macs((x.rows * w.rows * w.cols) as u64);
        Ok(DenseMatrix::from_raw(x.rows, w.rows, out))
    }
}

pub fn mlp_forward(x: &DenseMatrix, layers: &[Layer]) -> Result<DenseMatrix> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(&h)?;
    }
    Ok(h)
}

/// Column means as a `1 × cols` matrix.
pub fn mean_pool_rows(x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows == 0 {
        return Err(AifError::Precondition("mean pooling over zero rows".into()));
    }
    let mut sums = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        for (s, &v) in sums.iter_mut().zip(x.row(r)) {
            *s += f64::from(v);
        }
    }
    let n = x.rows as f64;
    Ok(DenseMatrix::from_raw(
        1,
        x.cols,
        sums.into_iter().map(|s| (s / n) as f32).collect(),
    ))
}
