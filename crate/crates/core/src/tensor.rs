//! Dense 4-D tensors in (batch, channels, height, width) layout.

use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` is used for gradient checks, `f32` for training.
pub trait Float:
    num_traits::Float + Default + Debug + Send + Sync + Sum + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    /// `c = alpha * a * b + beta * c` for row-major matrices given by pointer and strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (`c` vs `a`/`b`) matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Tensor extents: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Flat row-major offset of `(n, c, y, x)`.
    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "{} elements do not fill dims {:?}",
                data.len(),
                dims.as_array()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: Dims::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "expected a scalar, found dims {:?}",
                self.dims.as_array()
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Copies batch item `n` out as a single-image tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.dims.n {
            return Err(Error::invalid(format!(
                "batch index {n} out of range for batch {}",
                self.dims.n
            )));
        }
        let per = self.dims.c * self.dims.plane();
        Ok(Tensor {
            dims: Dims::new(1, self.dims.c, self.dims.h, self.dims.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Stacks tensors with equal (c, h, w) along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if (t.dims.c, t.dims.h, t.dims.w) != (d.c, d.h, d.w) {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims.as_array(),
                    d.as_array()
                )));
            }
            n += t.dims.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: Dims::new(n, d.c, d.h, d.w),
            data,
        })
    }

    /// Extracts the spatial window with top-left `(y, x)` and edge `h × w`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        let d = self.dims;
        if y + h > d.h || x + w > d.w {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y},{x}) exceeds {}x{}",
                d.h, d.w
            )));
        }
        Ok(Tensor::from_fn(Dims::new(d.n, d.c, h, w), |n, c, yy, xx| {
            self.at(n, c, y + yy, x + xx)
        }))
    }
}
