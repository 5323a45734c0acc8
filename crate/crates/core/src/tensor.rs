//! Dense rank-3 arrays laid out as (batch, length, channels), row-major.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type for tensors. Implemented for `f32` (default) and `f64`
/// (used for gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// (batch, length, channels)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, len: usize, channels: usize) -> Self {
        Shape {
            batch,
            len,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.len * self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.batch, self.len, self.channels]
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.len + t) * self.channels + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.batch, self.len, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} elements do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    /// A single-batch, single-channel sequence.
    pub fn sequence(values: &[f64]) -> Self {
        Self::from_f64(Shape::new(1, values.len(), 1), values).expect("shape matches")
    }

    /// A (1, 1, C) vector, the layout used for biases and per-channel parameters.
    pub fn vector(values: &[f64]) -> Self {
        Self::from_f64(Shape::new(1, 1, values.len()), values).expect("shape matches")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> T {
        self.data[self.shape.index(b, t, c)]
    }

    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape(format!(
                "expected a scalar, found shape {}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of channels `start..start + count`.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.channels {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {s}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(s.batch * s.len * count);
        for row in self.data.chunks_exact(s.channels) {
            data.extend_from_slice(&row[start..start + count]);
        }
        Ok(Tensor {
            shape: Shape::new(s.batch, s.len, count),
            data,
        })
    }

    /// Index of the largest channel at every (batch, position).
    pub fn argmax_channels(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.shape.channels.max(1))
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        let err = Tensor::<f32>::new(Shape::new(1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f64>::from_f64(Shape::new(2, 2, 2), &[0., 1., 2., 3., 4., 5., 6., 7.])
            .unwrap();
        assert_eq!(t.at(1, 0, 1), 5.0);
        assert_eq!(t.at(0, 1, 0), 2.0);
    }

    #[test]
    fn channel_slice_and_argmax() {
        let t = Tensor::<f64>::from_f64(Shape::new(1, 2, 3), &[0., 5., 1., 9., 2., 3.]).unwrap();
        assert_eq!(t.channel_slice(1, 2).unwrap().data(), &[5., 1., 2., 3.]);
        assert_eq!(t.argmax_channels(), vec![1, 0]);
        assert!(t.channel_slice(2, 2).is_err());
    }
}
