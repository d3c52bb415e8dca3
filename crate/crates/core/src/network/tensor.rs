use std::ops::Range;

use super::real::Real;

/// Dense NCHW batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Self {
        assert_eq!(data.len(), batch * channels * height * width);
        Tensor {
            batch,
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// One channel plane of one sample.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copies channels `range` into a new tensor.
    pub fn gather_channels(&self, range: Range<usize>) -> Tensor<T> {
        let p = self.plane_len();
        let mut out = Tensor::zeros(self.batch, range.len(), self.height, self.width);
        for n in 0..self.batch {
            let src = &self.sample(n)[range.start * p..range.end * p];
            out.sample_mut(n).copy_from_slice(src);
        }
        out
    }

    /// Writes `src` into channels starting at `start`.
    pub fn scatter_channels(&mut self, start: usize, src: &Tensor<T>) {
        let p = self.plane_len();
        for n in 0..self.batch {
            let dst = &mut self.sample_mut(n)[start * p..(start + src.channels) * p];
            dst.copy_from_slice(src.sample(n));
        }
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!((a.batch, a.height, a.width), (b.batch, b.height, b.width));
        let mut out = Tensor::zeros(a.batch, a.channels + b.channels, a.height, a.width);
        out.scatter_channels(0, a);
        out.scatter_channels(a.channels, b);
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from_f64(v.into())).collect(),
        }
    }
}
