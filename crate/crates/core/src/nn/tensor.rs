use std::fmt;

use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

/// N×C×H×W extent of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
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

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-4 array stored row-major in N, C, H, W order.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| S::of(rng.gen_range(lo..hi)))
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() needs a one-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Config(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copy of sample `n` as a 1×C×H×W tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        let shape = Shape::new(1, self.shape.c, self.shape.h, self.shape.w);
        Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
            requires_grad: false,
        }
    }

    /// Stacks equally shaped tensors along N.
    pub fn stack(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("cannot stack zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut n = 0;
        for t in parts {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::Config(format!(
                    "cannot stack {} with {}",
                    first, t.shape
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values in another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3.0);
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let a = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 1.0);
        let b = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(s.sample(1), b);
    }
}
