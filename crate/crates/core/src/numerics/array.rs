//! Dense row-major `f32` arrays and the handful of array-level kernels that
//! the tape ops are built from.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// A dense row-major array with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Array::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for rank-0/rank-1 scalars is not special-cased).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f32> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn set_grad(&mut self, g: Vec<f32>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for array of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }
}

/// Index of the largest element; ties go to the lower index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax along `axis`, stabilized by subtracting the per-slice max.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {} invalid for shape {:?}",
            axis, shape
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |k: usize| base + k * inner;
            let mut max = f32::NEG_INFINITY;
            for k in 0..n {
                max = max.max(src[idx(k)]);
            }
            let mut sum = 0.0f32;
            for k in 0..n {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for k in 0..n {
                out[idx(k)] *= inv;
            }
        }
    }
    Array::new(shape.to_vec(), out)
}

/// In-place row softmax over a contiguous slice.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn log_sum_exp_f64(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Layer normalization over the last axis with epsilon [`LAYER_NORM_EPS`].
pub fn layer_norm(x: &Array, gain: &[f32], bias: &[f32]) -> Result<Array> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias of length {}/{} for width {}",
            gain.len(),
            bias.len(),
            c
        )));
    }
    let mut out = vec![0.0f32; x.len()];
    for r in 0..x.rows() {
        let (mean, rstd) = row_moments(x.row(r));
        let dst = &mut out[r * c..(r + 1) * c];
        for (j, (&v, d)) in x.row(r).iter().zip(dst.iter_mut()).enumerate() {
            *d = (v - mean) * rstd * gain[j] + bias[j];
        }
    }
    Array::new(x.shape().to_vec(), out)
}

/// Mean and reciprocal standard deviation of a row, accumulated in f64.
pub(crate) fn row_moments(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean as f32, (1.0 / (var + LAYER_NORM_EPS as f64).sqrt()) as f32)
}
