//! Dense row-major tensors and the handful of kernels the networks need.

mod ops;

pub use ops::{
    bilinear_sample_2d, bilinear_sample_2d_backward, grad_check, layer_norm_backward,
    layer_norm_noaffine, matmul, softmax, softmax_backward, Linear, LinearGrads, LN_EPS,
};
pub(crate) use ops::dims3;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{f, s, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Fails when the data length disagrees with the shape or a value is not finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![data.len()],
                context: "tensor data length",
            });
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {p}")));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| s(v)).collect())
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: Vec<usize>, mut fill: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut fill).collect(),
        }
    }

    // Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: shape,
                context: "reshape",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: T) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    pub fn check_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context,
            });
        }
        Ok(())
    }

    pub fn map(&self, op: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| op(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_shape(other, "elementwise")?;
        Ok(Self::raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f(v)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|&v| f(v).abs()).fold(0.0, f64::max)
    }

    /// L-infinity distance.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f(a) - f(b)).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| s(f(v))).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f(v)).collect()
    }

    /// Views the tensor as rows over its trailing axis.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Self::raw(vec![n, m], out))
    }

    pub(crate) fn dims2(&self, context: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: vec![0, 0],
                context,
            }),
        }
    }

    /// Concatenates tensors along the trailing axis; leading dims must agree.
    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("concat_last"))?;
        let lead = &first.shape[..first.rank().saturating_sub(1)];
        for p in parts {
            if &p.shape[..p.rank().saturating_sub(1)] != lead {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                    context: "concat_last",
                });
            }
        }
        let rows: usize = lead.iter().product();
        let width: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let c = p.last_dim();
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(Self::raw(shape, data))
    }
}

/// Initialization scheme for [`SeededInit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on [-scale, scale].
    UniformPm { scale: f64 },
    Zeros,
    Ones,
}

/// Deterministic parameter initializer: same (seed, scheme, shape) gives the same tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeededInit {
    pub seed: u64,
    pub scheme: InitScheme,
}

impl SeededInit {
    pub fn uniform(seed: u64, scale: f64) -> Self {
        Self {
            seed,
            scheme: InitScheme::UniformPm { scale },
        }
    }

    pub fn tensor<T: Scalar>(&self, shape: Vec<usize>) -> Tensor<T> {
        match self.scheme {
            InitScheme::Zeros => Tensor::zeros(shape),
            InitScheme::Ones => Tensor::ones(shape),
            InitScheme::UniformPm { scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Tensor::from_fn(shape, |_| s(rng.gen_range(-1.0..=1.0) * scale))
            }
        }
    }
}

/// Derives a child seed so that distinct parameter tensors get independent streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
