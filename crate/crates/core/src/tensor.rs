//! Dense activation tensors.
//!
//! Storage is channel-major across the batch (`[channel][sample][row][col]`),
//! so a convolution's GEMM output lands in place without a transpose.

use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(channels: usize, batch: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * batch * height * width, "tensor data length");
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + b) * self.height + y) * self.width + x
    }

    pub fn plane(&self, c: usize, b: usize) -> &[T] {
        let p = self.plane_len();
        let start = (c * self.batch + b) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (c * self.batch + b) * p;
        &mut self.data[start..start + p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}
