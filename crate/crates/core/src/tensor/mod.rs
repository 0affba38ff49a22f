//! Dense NCHW feature maps and the reference kernels every block is built from.
//!
//! Kernels are generic over [`Scalar`] so the same code serves 32-bit inference and the
//! 64-bit shadow arithmetic used by gradient checks.

mod grad;
mod ops;

use std::fmt;

use num_traits::Float;
use rand::Rng;

use crate::error::{config_err, shape_err, Result};

pub use grad::{
    add_backward, batchnorm_backward, concat_backward, conv2d_backward, conv2d_backward_raw,
    maxpool2d_backward, silu_backward, upsample_nearest_backward, ConvGrads,
};
pub use ops::{
    add, batchnorm_infer, batchnorm_raw, concat, concat_channels, conv2d, conv2d_raw,
    conv_output_len, maxpool2d, sigmoid, silu, silu_scalar, upsample_nearest, BnParams,
    ConvParams,
};

pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logical NCHW dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A 4-D feature map, row-major NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor4 = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    fn check_dims(n: usize, c: usize, h: usize, w: usize) -> Result<Shape> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return config_err(format!(
                "tensor dimensions must all be >= 1, got {n}x{c}x{h}x{w}"
            ));
        }
        Ok(Shape::new(n, c, h, w))
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::filled(n, c, h, w, T::zero())
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Result<Self> {
        let shape = Self::check_dims(n, c, h, w)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        let shape = Self::check_dims(n, c, h, w)?;
        if data.len() != shape.numel() {
            return shape_err(format!(
                "data length {} does not match {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::from_vec(shape.n, shape.c, shape.h, shape.w, data)
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let shape = Self::check_dims(n, c, h, w)?;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random<R: Rng>(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(n, c, h, w, |_, _, _, _| {
            T::from(rng.gen_range(lo..hi)).unwrap()
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.shape.n, self.shape.c, self.shape.h, self.shape.w]
    }

    pub fn n(&self) -> usize {
        self.shape.n
    }
    pub fn c(&self) -> usize {
        self.shape.c
    }
    pub fn h(&self) -> usize {
        self.shape.h
    }
    pub fn w(&self) -> usize {
        self.shape.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.c + ch) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: T) {
        let i = self.index(b, ch, y, x);
        self.data[i] = v;
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

    /// Contiguous slice holding one channel plane of one batch item.
    pub fn plane(&self, b: usize, ch: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.c + ch) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    /// Copies channels `[start, start + len)`.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return shape_err(format!(
                "channel slice [{start}, {}) out of range for {} channels",
                start + len,
                self.shape.c
            ));
        }
        let p = self.shape.plane();
        let mut data = Vec::with_capacity(self.shape.n * len * p);
        for b in 0..self.shape.n {
            let from = (b * self.shape.c + start) * p;
            data.extend_from_slice(&self.data[from..from + len * p]);
        }
        Ok(Tensor {
            shape: self.shape.with_channels(len),
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }
}
