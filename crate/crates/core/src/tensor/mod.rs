//! Dense rank-4 tensors and the differentiable primitives built on them.
//!
//! Layout is always batch-channel-height-width, row-major. Every primitive
//! comes as a forward function plus an explicit backward function; there is
//! no dynamic graph. Blocks compose the primitives and record what their
//! backward passes need.

mod conv;
mod loss;
mod norm;
mod ops;
mod pool;

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward, conv_output_extent, transposed_conv2d, transposed_conv2d_backward,
    transposed_output_extent, ConvGrads, ConvParams,
};
pub use loss::{pixel_cross_entropy, softmax_cross_entropy, LabelMap};
pub use norm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_forward, BnCache, BnGrads, BnParams,
};
pub use ops::{add, add_assign, concat_channels, relu, relu_backward, split_channels};
pub use pool::{maxpool2d, maxpool2d_backward, maxpool2d_with_indices};

/// Floating point element type. `f64` is used for training and gradient
/// checks, `f32` for inference and benchmarking.
pub trait Scalar:
    Float + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Batch normalization statistics are taken from the batch in `Train` and
/// from the running estimates in `Infer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements supplied for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The `h × w` plane of channel `c` in batch element `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum of elementwise products, accumulated in index order.
    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Slice `count` batch elements starting at `start`.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n {
            return Err(Error::shape(
                "batch_slice",
                format!("rows {start}..{} of batch {}", start + count, self.shape.n),
            ));
        }
        let per = self.shape.c * self.shape.plane_len();
        Ok(Tensor4 {
            shape: Shape4::new(count, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Stack single-batch tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let inner = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (inner.c, inner.h, inner.w) {
                return Err(Error::shape("stack", format!("{s} vs {inner}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(n, inner.c, inner.h, inner.w),
            data,
        })
    }
}

pub fn ensure_finite<T: Scalar>(t: &Tensor4<T>, what: &str) -> Result<()> {
    match t.first_non_finite() {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite {
            what: what.to_string(),
            index,
        }),
    }
}
