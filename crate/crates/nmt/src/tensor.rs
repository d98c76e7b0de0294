//! Dense row-major tensors and the numeric kernels everything else builds on.
//!
//! Values are stored in 32-bit floats; reductions accumulate in 64-bit to keep
//! the worked-example numbers reproducible.

use crate::error::{Error, Result};

/// Epsilon added to the layer-norm denominator so constant inputs stay finite.
pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Dense tensor with 1 to 3 dimensions, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert!(
            !shape.is_empty() && shape.len() <= 3,
            "tensor rank must be 1-3, got {:?}",
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {:?}", shape);
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: &[Vec<f32>]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Element (i, j) of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f32 {
        assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Activation function kinds shared across the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise activation.
pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f32::tanh),
        Activation::Relu => x.map(|v| v.max(0.0)),
    }
}

/// Derivative of an activation. For sigmoid and tanh the argument is the
/// forward *output* y; for relu it is the pre-activation x.
pub fn activation_grad(kind: Activation, y_or_x: &Tensor) -> Tensor {
    match kind {
        Activation::Sigmoid => y_or_x.map(|y| y * (1.0 - y)),
        Activation::Tanh => y_or_x.map(|y| 1.0 - y * y),
        Activation::Relu => y_or_x.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Matrix product. Accepts matrix*matrix, matrix*vector (column), and
/// vector*matrix (row). Inner dimensions must agree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(err());
            }
            let mut out = Tensor::zeros(vec![m, n]);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for t in 0..k {
                        acc += a.data[i * k + t] as f64 * b.data[t * n + j] as f64;
                    }
                    out.data[i * n + j] = acc as f32;
                }
            }
            Ok(out)
        }
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            if k != b.shape[0] {
                return Err(err());
            }
            let mut out = Tensor::zeros(vec![m]);
            for i in 0..m {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += a.data[i * k + t] as f64 * b.data[t] as f64;
                }
                out.data[i] = acc as f32;
            }
            Ok(out)
        }
        (1, 2) => {
            let k = a.shape[0];
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(err());
            }
            let mut out = Tensor::zeros(vec![n]);
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += a.data[t] as f64 * b.data[t * n + j] as f64;
                }
                out.data[j] = acc as f32;
            }
            Ok(out)
        }
        _ => Err(err()),
    }
}

/// Dot product of two equal-length vectors, f64 accumulation.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 || a.len() != b.len() {
        return Err(Error::Shape {
            op: "dot",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let acc: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    Ok(Tensor::scalar(acc as f32))
}

fn softmax_slice(v: &[f32], out: &mut [f32]) {
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(v) {
        let e = ((x - max) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

/// Softmax over a vector. The row max is subtracted before exponentiation, so
/// entries of large magnitude stay finite; the result is mathematically
/// identical.
pub fn softmax(v: &Tensor) -> Tensor {
    assert_eq!(v.rank(), 1, "softmax expects a vector");
    let mut out = Tensor::zeros(v.shape.to_vec());
    softmax_slice(&v.data, &mut out.data);
    out
}

/// Row-wise softmax over a matrix.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    assert_eq!(m.rank(), 2, "softmax_rows expects a matrix");
    let (r, c) = (m.shape[0], m.shape[1]);
    let mut out = Tensor::zeros(m.shape.to_vec());
    for i in 0..r {
        softmax_slice(&m.data[i * c..(i + 1) * c], &mut out.data[i * c..(i + 1) * c]);
    }
    out
}

/// Mean and population standard deviation of a slice, f64 accumulation.
pub fn mean_std(s: &[f32]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = s.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Layer normalization: g/(sigma+eps) * (s - mu) + b, with mu and sigma the
/// mean and population standard deviation of s.
pub fn layer_norm(s: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(s.rank(), 1, "layer_norm expects a vector");
    assert_eq!(s.shape, g.shape, "gain shape mismatch");
    assert_eq!(s.shape, b.shape, "bias shape mismatch");
    let (mean, std) = mean_std(&s.data);
    let denom = std + LAYER_NORM_EPS as f64;
    let mut out = Tensor::zeros(s.shape.to_vec());
    for i in 0..s.len() {
        let norm = (s.data[i] as f64 - mean) / denom;
        out.data[i] = (g.data[i] as f64 * norm + b.data[i] as f64) as f32;
    }
    out
}
