use std::fmt;

use crate::Scalar;

/// NCHW extent of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one sample (`c * h * w`).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_batch(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: Scalar) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<Scalar>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length does not match shape {shape}"
        );
        Self { shape, data }
    }

    /// A `[rows, cols, 1, 1]` tensor, the layout used for logits and features.
    pub fn matrix(rows: usize, cols: usize, data: Vec<Scalar>) -> Self {
        Self::from_vec(Shape::new(rows, cols, 1, 1), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the buffer under another shape with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.numel(), self.shape.numel(), "reshape changes numel");
        self.shape = shape;
        self
    }

    pub fn sample(&self, i: usize) -> &[Scalar] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [Scalar] {
        let len = self.shape.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Row `i` of a `[rows, cols, 1, 1]` tensor. Same as [`Tensor::sample`].
    pub fn row(&self, i: usize) -> &[Scalar] {
        self.sample(i)
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: Scalar) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Concatenate along the batch axis. All parts must share `c, h, w`.
    pub fn stack(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let base = parts[0].shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for part in parts {
            assert_eq!(part.shape.with_batch(0), base.with_batch(0));
            n += part.shape.n;
            data.extend_from_slice(&part.data);
        }
        Self::from_vec(base.with_batch(n), data)
    }

    /// Samples `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let len = self.shape.sample_len();
        Self::from_vec(
            self.shape.with_batch(end - start),
            self.data[start * len..end * len].to_vec(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5.0, 6.0]);
        let s = Tensor::stack(&[&a, &b]);
        assert_eq!(s.shape(), Shape::new(3, 1, 1, 2));
        assert_eq!(s.slice_batch(0, 2), a);
        assert_eq!(s.slice_batch(2, 3), b);
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]);
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }
}
