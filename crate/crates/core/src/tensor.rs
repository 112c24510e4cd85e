//! Dense NCHW tensors.
//!
//! Storage is generic over the scalar type so that the same kernels run in
//! single precision for models and in double precision for finite-difference
//! gradient checks. Reductions always accumulate in `f64`.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    num_traits::Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one (h, w) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    fn is_valid(&self) -> bool {
        self.n > 0 && self.c > 0 && self.h > 0 && self.w > 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major (n, c, h, w) array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::config(format!("tensor dims must be >= 1, got {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on a zero dimension; shapes reaching here are produced by
    /// validated configs.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.is_valid(), "tensor dims must be >= 1, got {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        assert!(shape.is_valid(), "tensor dims must be >= 1, got {shape}");
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `op` when any element is NaN/Inf.
    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{op}: non-finite value {} at flat index {i} of tensor {}",
                self.data[i], self.shape
            ))),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Stack tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat_batch of an empty list"))?
            .shape;
        let mut n = 0;
        for p in parts {
            if p.shape.with_n(1) != first.with_n(1) {
                return Err(Error::config(format!(
                    "concat_batch: shape {} incompatible with {}",
                    p.shape, first
                )));
            }
            n += p.shape.n;
        }
        let mut data = Vec::with_capacity(n * first.c * first.plane());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(first.with_n(n), data))
    }

    /// Inverse of [`Tensor::concat_batch`] for two parts: the first `n0`
    /// batch entries and the rest.
    pub fn split_batch(&self, n0: usize) -> Result<(Self, Self)> {
        if n0 == 0 || n0 >= self.shape.n {
            return Err(Error::config(format!(
                "split_batch at {n0} of batch {}",
                self.shape.n
            )));
        }
        let k = n0 * self.shape.c * self.shape.plane();
        Ok((
            Tensor::from_parts(self.shape.with_n(n0), self.data[..k].to_vec()),
            Tensor::from_parts(self.shape.with_n(self.shape.n - n0), self.data[k..].to_vec()),
        ))
    }

    /// The `i`-th batch entry as a batch of one.
    pub fn batch_item(&self, i: usize) -> Self {
        let k = self.shape.c * self.shape.plane();
        Tensor::from_parts(self.shape.with_n(1), self.data[i * k..(i + 1) * k].to_vec())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "add_assign: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}
