//! Dense row-major `f64` tensors and the plain (non-recording) kernels used
//! by both the autodiff tape and the deployed inference path.

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor kernels and the tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(TensorError::Usage(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::Usage(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Usage("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; for a vector this is its length.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Usage(format!(
                "{op}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = rhs.matrix_dims("matmul")?;
        if k != k2 {
            return shape_err("matmul", &self.shape, &rhs.shape);
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_t")?;
        let (n, k2) = rhs.matrix_dims("matmul_t")?;
        if k != k2 {
            return shape_err("matmul_t", &self.shape, &rhs.shape);
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = self.matrix_dims("t_matmul")?;
        let (k2, n) = rhs.matrix_dims("t_matmul")?;
        if k != k2 {
            return shape_err("t_matmul", &self.shape, &rhs.shape);
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return shape_err(op, &self.shape, &rhs.shape);
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return shape_err("add_assign", &self.shape, &rhs.shape);
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.matrix_dims("add_row_vector")?;
        if bias.len() != n || bias.shape.len() != 1 {
            return shape_err("add_row_vector", &self.shape, &bias.shape);
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row_vector(&self, scale: &Tensor) -> Result<Tensor> {
        let (_, n) = self.matrix_dims("mul_row_vector")?;
        if scale.len() != n || scale.shape.len() != 1 {
            return shape_err("mul_row_vector", &self.shape, &scale.shape);
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (o, g) in row.iter_mut().zip(&scale.data) {
                *o *= g;
            }
        }
        Ok(out)
    }

    /// Multiplies row `r` by `scale[r]` (left multiplication by a diagonal).
    pub fn scale_rows(&self, scale: &Tensor) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("scale_rows")?;
        if scale.len() != m || scale.shape.len() != 1 {
            return shape_err("scale_rows", &self.shape, &scale.shape);
        }
        let mut out = self.clone();
        for (row, g) in out.data.chunks_mut(n).zip(&scale.data) {
            for o in row.iter_mut() {
                *o *= g;
            }
        }
        Ok(out)
    }

    /// `γ ⊙ x + β` broadcast over rows.
    pub fn affine_rows(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.mul_row_vector(gamma)?.add_row_vector(beta)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = self.matrix_dims("row_softmax")?;
        if !self.all_finite() {
            return Err(TensorError::NonFinite { op: "row_softmax" });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(out)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    /// Parameter-free per-row normalization.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Tensor> {
        let (_, n) = self.matrix_dims("layer_norm")?;
        if n < 2 {
            return Err(TensorError::Usage("layer_norm: need at least 2 channels".into()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            let (mean, inv_std) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        Ok(out)
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("slice_rows")?;
        if start + count > m || count == 0 {
            return Err(TensorError::Usage(format!(
                "slice_rows: rows {start}..{} out of range for {m}",
                start + count
            )));
        }
        Tensor::new(&[count, n], self.data[start * n..(start + count) * n].to_vec())
    }

    /// Columns `start..start + count` of a matrix.
    pub fn slice_cols(&self, start: usize, count: usize) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("slice_cols")?;
        if start + count > n || count == 0 {
            return Err(TensorError::Usage(format!(
                "slice_cols: columns {start}..{} out of range for {n}",
                start + count
            )));
        }
        let mut out = Vec::with_capacity(m * count);
        for r in 0..m {
            out.extend_from_slice(&self.data[r * n + start..r * n + start + count]);
        }
        Tensor::new(&[m, count], out)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_rows: nothing to concatenate".into()))?;
        let (_, n) = first.matrix_dims("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, c) = p.matrix_dims("concat_rows")?;
            if c != n {
                return shape_err("concat_rows", &first.shape, &p.shape);
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, n], data)
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat_cols: nothing to concatenate".into()))?;
        let (m, _) = first.matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.matrix_dims("concat_cols")?;
            if r != m {
                return shape_err("concat_cols", &first.shape, &p.shape);
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Tensor::new(&[m, total], data)
    }

    /// Mean of each consecutive group of `group` rows.
    pub fn group_mean_rows(&self, group: usize) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("group_mean")?;
        if group == 0 || m % group != 0 {
            return Err(TensorError::Usage(format!(
                "group_mean: {m} rows not divisible into groups of {group}"
            )));
        }
        let groups = m / group;
        let mut out = vec![0.0; groups * n];
        let inv = 1.0 / group as f64;
        for g in 0..groups {
            let o = &mut out[g * n..(g + 1) * n];
            for r in 0..group {
                let row = &self.data[(g * group + r) * n..(g * group + r + 1) * n];
                for (o, v) in o.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in o.iter_mut() {
                *o *= inv;
            }
        }
        Tensor::new(&[groups, n], out)
    }

    /// Relative discrepancy `max|a-b| / max(max|b|, tiny)`.
    pub fn max_rel_diff(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.sub(reference)?;
        Ok(diff.max_abs() / reference.max_abs().max(f64::MIN_POSITIVE))
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn matmul_t_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Mean and `1/sqrt(var + eps)` of a row (population variance).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}
