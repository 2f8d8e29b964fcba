//! Dense row-major FP32 tensors and the handful of kernels a ViT forward pass needs.
//!
//! Every kernel here is a pure function with a fixed evaluation order, so the
//! same inputs give the same bits on every run. `matmul` in particular
//! accumulates each output element from `0.0` in ascending inner-index order;
//! the clustered kernel in [`crate::inference`] follows the same order and is
//! compared against it with exact equality.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, a length mismatch and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor("shape must have at least one dimension".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("zero-sized dimension in {shape:?}")));
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value at index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::InvalidTensor(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Adds a length-`cols` vector to every row of a 2-D tensor.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, cols) = self.dims2()?;
        if bias.len() != cols {
            return Err(Error::Shape {
                op: "add_row_vector",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Copies columns `start..start + width` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + width > c || width == 0 {
            return Err(Error::InvalidTensor(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::new(vec![r, width], out)
    }
}

/// `a[m×k] · b[k×n]`.
///
/// Each output element is accumulated in FP32 starting from `0.0`, adding
/// `a[i][t]·b[t][j]` for `t = 0, 1, …, k-1` in that order. Loop nesting is
/// `i, t, j` so the inner loop streams a row of `b`; this does not change the
/// per-element summation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o += a_it * b_tj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.data.clone();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), out)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalisation over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = *x.shape.last().unwrap();
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.len() != d {
            return Err(Error::Shape {
                op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let mut out = x.data.clone();
    for slice in out.chunks_exact_mut(d) {
        let mean = slice.iter().sum::<f32>() / d as f32;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in slice.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Multi-head scaled dot-product attention over `s` tokens of width `d`.
///
/// Head `h` uses columns `h·dₕ..(h+1)·dₕ` of `q`, `k` and `v`; its output is
/// written back into the same columns.
pub fn mha_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (s, d) = q.dims2()?;
    for other in [k, v] {
        if other.shape != q.shape {
            return Err(Error::Shape {
                op: "mha_attention",
                lhs: q.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = (dh as f32).sqrt();
    let mut out = vec![0.0f32; s * d];
    for h in 0..heads {
        let qh = q.column_slice(h * dh, dh)?;
        let kh_t = k.column_slice(h * dh, dh)?.transpose2()?;
        let vh = v.column_slice(h * dh, dh)?;
        let scores = matmul(&qh, &kh_t)?.map(|x| x / scale)?;
        let attn = softmax_rows(&scores)?;
        let ctx = matmul(&attn, &vh)?;
        for i in 0..s {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(ctx.row(i));
        }
    }
    Tensor::new(vec![s, d], out)
}
