//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Activations follow the `[batch, channel, x, y, z]` layout convention in a
//! contiguous row-major buffer. Training and inference run in `f32`;
//! gradient verification runs the same code instantiated at `f64`, where
//! central finite differences are trustworthy.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{
    directional_derivative_check, finite_difference_check, finite_difference_check_coords,
    FdReport,
};
pub use tape::{Grads, NodeId, Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of the compute core: `f32` for training/inference,
/// `f64` for verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for lossless literal-to-scalar conversion.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("scalar conversion")
}

/// Dense N-dimensional array. Cloning is cheap (shared buffer); mutation
/// copies when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The five extents of an activation tensor `[B, C, X, Y, Z]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [b, c, x, y, z] => Ok([b, c, x, y, z]),
            _ => Err(Error::invalid(
                "tensor",
                format!("expected 5-D activation, got shape {:?}", self.shape),
            )),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "tensor",
                format!("item() on shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add_tensor(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("add", self, other)?;
        let mut out = self.clone();
        let dst = out.data_mut();
        for (d, &v) in dst.iter_mut().zip(other.data().iter()) {
            *d += v;
        }
        Ok(out)
    }

    /// In-place elementwise accumulate.
    pub fn accumulate(&mut self, other: &Tensor<T>) -> Result<()> {
        check_same_shape("accumulate", self, other)?;
        let dst = self.data_mut();
        for (d, &v) in dst.iter_mut().zip(other.data().iter()) {
            *d += v;
        }
        Ok(())
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|v| v * factor)
    }

    /// Reinterpret under a new shape with the same element count. Shares the
    /// underlying buffer, so this is free.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(
                "reshape",
                format!("{:?} does not hold {} elements", shape, self.numel()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Convert elements to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| s(v.to_f64().unwrap())).collect()),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ..]", self.data[0], self.data[1])
        }
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        for (axis, (&ea, &eb)) in a.shape().iter().zip(b.shape().iter()).enumerate() {
            if ea != eb {
                return Err(Error::ShapeMismatch {
                    op,
                    axis: axis.to_string(),
                    expected: ea,
                    got: eb,
                });
            }
        }
        return Err(Error::invalid(
            op,
            format!("rank mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}
