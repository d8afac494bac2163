//! Dense row-major f64 tensors and the handful of array ops the layers need.
//!
//! Shapes follow the `[N, C, H, W]` convention where a batch axis is involved;
//! vectors of per-channel statistics are rank-1 `[C]`, correlation matrices
//! rank-2 `[C, C]`. Everything is plain loops over `Vec<f64>` at desk-scale
//! sizes, no broadcasting beyond what the layers use.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense N-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape's volume matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// The value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D accessor; `self` must be rank 2.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dimensions of a rank-4 `[N, C, H, W]` tensor.
pub fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::invalid(format!(
            "expected a rank-4 [N,C,H,W] tensor, got shape {other:?}"
        ))),
    }
}

/// Per-channel mean and population variance over the `N, H, W` axes.
///
/// Returns `(mu, var)`, both `[C]`. Variance is biased (divides by N*H*W).
pub fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims4(x)?;
    let m = n * h * w;
    if m == 0 {
        return Err(Error::invalid("channel_moments: empty batch (N*H*W = 0)"));
    }
    let data = x.data();
    let plane = h * w;
    let mut mu = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = 0.0;
            for k in 0..plane {
                acc += data[base + k];
            }
            mu[ci] += acc;
        }
    }
    for v in mu.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = 0.0;
            for k in 0..plane {
                let d = data[base + k] - mu[ci];
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    Ok((Tensor::from_vec(mu), Tensor::from_vec(var)))
}

/// Row-wise softmax of a rank-2 matrix, stabilized by subtracting each row's max.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let shape = m.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "softmax_rows: expected rank-2, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &m.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + j] = e;
            denom += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= denom;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Matrix-vector product of a `[R, C]` matrix and a `[C]` vector.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::invalid(format!(
                "matvec: expected rank-2 matrix, got {other:?}"
            )))
        }
    };
    if v.shape() != [cols] {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            left: m.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += m.data()[r * cols + c] * v.data()[c];
        }
        out[r] = acc;
    }
    Ok(Tensor::from_vec(out))
}

/// Matrix product of `[M, K]` and `[K, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        other => {
            return Err(Error::invalid(format!(
                "matmul: left operand must be rank-2, got {other:?}"
            )))
        }
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        other => {
            return Err(Error::invalid(format!(
                "matmul: right operand must be rank-2, got {other:?}"
            )))
        }
    };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data()[kk * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Transpose of a rank-2 matrix.
pub fn transpose(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::invalid(format!(
                "transpose: expected rank-2, got {other:?}"
            )))
        }
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m.data()[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], out)
}
