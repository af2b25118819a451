// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal dense tensor kernel.
//!
//! Tensors are row-major `f32` arrays. Only the operations the encoder forward
//! pass needs are provided; there is no broadcasting beyond adding a bias row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
///
/// `data.len()` always equals the product of `shape` (1 for rank 0) and all
/// values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// GELU flavour used by the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluVariant {
    /// `x * Phi(x)` with the erf-based normal CDF.
    #[default]
    Erf,
    /// The tanh approximation used by some checkpoints.
    Tanh,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the flat data. The shape cannot change through it.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing dimension (1 for rank 0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Row `i` of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.last_dim();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.last_dim().max(1))
    }

    pub fn n_rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            n => self.data.len() / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Adds `bias` (length = trailing extent) to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.last_dim();
        if bias.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let Some((&lead, rest)) = self.shape.split_first() else {
            return Err(Error::InvalidTensor("select on a rank-0 tensor".into()));
        };
        if index >= lead {
            return Err(Error::InvalidTensor(format!(
                "index {index} out of range for leading extent {lead}"
            )));
        }
        let stride: usize = rest.iter().product();
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidTensor("stack of zero tensors".into()));
        };
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            first.check_same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(Error::InvalidTensor(format!(
                "{op} expects a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `c[i][j] = sum_t a[i][t] * b[t][j]` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    let (m, k) = a.dims2("matmul").map_err(|_| mismatch())?;
    let (k2, n) = b.dims2("matmul").map_err(|_| mismatch())?;
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a.data[i * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Softmax over the trailing dimension, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(x, None)
}

/// Softmax over the trailing dimension where columns with `keep[j] == false`
/// receive exactly zero weight. A row with every column masked is all zeros.
pub fn softmax_rows_masked(x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
    let n = x.last_dim();
    if x.rank() == 0 || n == 0 {
        return Err(Error::InvalidTensor(
            "softmax over an empty trailing dimension".into(),
        ));
    }
    if let Some(keep) = keep {
        if keep.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows_masked",
                left: x.shape.clone(),
                right: vec![keep.len()],
            });
        }
    }
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| kept(j))
            .map(|(_, v)| *v)
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0f64;
        for (j, v) in row.iter_mut().enumerate() {
            if kept(j) {
                let e = (*v - max).exp();
                *v = e;
                sum += f64::from(e);
            } else {
                *v = 0.0;
            }
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` with population
/// variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(Error::InvalidTensor("layer_norm over an empty row".into()));
    }
    for p in [gamma, beta] {
        if p.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: x.shape.clone(),
                right: p.shape.clone(),
            });
        }
    }
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidTensor(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = ((f64::from(*v) - mean) * inv_std) as f32 * g + b;
        }
    }
    Ok(out)
}

/// Elementwise GELU.
pub fn gelu(x: &Tensor, variant: GeluVariant) -> Tensor {
    let f: fn(f64) -> f64 = match variant {
        GeluVariant::Erf => |v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
        GeluVariant::Tanh => |v| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (c * (v + 0.044_715 * v * v * v)).tanh())
        },
    };
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(f64::from(v)) as f32).collect(),
    }
}

/// Dot product of two equally long vectors, accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum::<f64>() as f32
}
