use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_in_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + 'static + std::iter::Sum
{
    const DTYPE: Dtype;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;

    fn bits(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element; `bytes` must hold exactly `DTYPE.size_in_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn as_f32(self) -> f32 {
        self as f32
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn as_f32(self) -> f32 {
        self
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}

/// Dense row-major tensor.
///
/// Zero-length extents are allowed so that an empty U block (no user rows)
/// is representable; every other extent is at least one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new(-bound, bound).expect("finite positive bound");
            (0..numel).map(|_| S::lit(dist.sample(rng))).collect()
        } else {
            vec![S::zero(); numel]
        };
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        S::DTYPE
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.row_len() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<S> {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Sum of `self ⊙ weights` with ascending accumulation.
    pub fn dot(&self, weights: &Tensor<S>) -> Result<S> {
        if self.shape != weights.shape {
            return Err(Error::shape("dot", &self.shape, &weights.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&weights.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality: distinguishes `-0.0` from `0.0` and compares NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Index of the first element whose bits differ, if any.
    pub fn first_bit_difference(&self, other: &Tensor<S>) -> Option<usize> {
        if self.shape != other.shape {
            return Some(0);
        }
        self.data
            .iter()
            .zip(&other.data)
            .position(|(a, b)| a.bits() != b.bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
