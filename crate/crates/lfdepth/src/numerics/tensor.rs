//! Dense tensors over `f32`/`f64` with channels-last layout.
//!
//! Rank-4 tensors are `(batch, height, width, channels)`; rank-3 are batched
//! matrices `(batch, rows, cols)`; rank-0 is a scalar.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LfError, Result};

/// Numeric precision of a tensor or a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::Single),
            1 => Ok(Precision::Double),
            other => Err(LfError::Checkpoint(format!("unknown precision tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

/// Scalar element of a tensor.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    fn from_f64c(x: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    fn from_f64c(x: f64) -> Self {
        x as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    const BYTES: usize = 4;
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    fn from_f64c(x: f64) -> Self {
        x
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    const BYTES: usize = 8;
}

/// Tensor shape, rank 0 to 4.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 4],
    rank: usize,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { dims: [1; 4], rank: 0 }
    }

    pub fn d1(n: usize) -> Self {
        Shape { dims: [n, 1, 1, 1], rank: 1 }
    }

    pub fn d2(a: usize, b: usize) -> Self {
        Shape { dims: [a, b, 1, 1], rank: 2 }
    }

    pub fn d3(a: usize, b: usize, c: usize) -> Self {
        Shape { dims: [a, b, c, 1], rank: 3 }
    }

    pub fn d4(a: usize, b: usize, c: usize, d: usize) -> Self {
        Shape { dims: [a, b, c, d], rank: 4 }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() > 4 {
            return Err(LfError::Shape(format!("rank {} exceeds 4", dims.len())));
        }
        let mut s = Shape { dims: [1; 4], rank: dims.len() };
        s.dims[..dims.len()].copy_from_slice(dims);
        Ok(s)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    #[inline]
    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// Total element count (1 for rank-0 scalars).
    pub fn len(&self) -> usize {
        self.dims[..self.rank].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Contiguous row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(LfError::Shape(format!(
                "shape {shape} wants {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Normal samples scaled by `std`.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64c(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Scalar value of a rank-0/one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterpret with a new shape of identical length.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.len() != self.data.len() {
            return Err(LfError::Shape(format!(
                "cannot reshape {} elements into {shape}",
                self.data.len()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64c().abs()))
    }

    /// Convert elementwise to another precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_lengths() {
        assert_eq!(Shape::scalar().len(), 1);
        assert_eq!(Shape::d4(2, 3, 4, 5).len(), 120);
        assert_eq!(Shape::d2(7, 0).len(), 0);
        assert_eq!(format!("{}", Shape::d3(1, 2, 3)), "[1, 2, 3]");
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Shape::d1(3), vec![1.0, 2.0]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::d1(2), vec![1.0, 2.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_vec(Shape::d2(2, 3), (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(Shape::d3(3, 2, 1)).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(Shape::d1(5)).is_err());
    }
}
