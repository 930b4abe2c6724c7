//! Dense tensors and the differentiable operations the networks are built from.
//!
//! Every operation comes as a forward function and a matching backward
//! function; layers in [`crate::models`] cache what the backward pass needs and
//! chain these in reverse order.

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod loss;
pub(crate) mod spike;

pub use adam::{Adam, AdamConfig, ParamMoments};
pub use batchnorm::{BatchNorm2d, BnMode};
pub use conv::{conv2d, Conv2d, conv2d_backward, conv_out_extent, Conv2dGrads, ConvGeometry};
pub use linear::{linear, Linear, linear_backward, LinearGrads};
pub use loss::{cross_entropy, mse_selected, LossOutput};
pub use spike::{surrogate_spike, surrogate_spike_backward, Surrogate};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", "data length", expected, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    /// A trainable tensor with a zeroed gradient buffer.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect();
        Self { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![S::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Adds `delta` into the gradient buffer; no-op for tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        if let Some(g) = self.grad.as_mut() {
            assert_eq!(g.len(), delta.len(), "gradient shape");
            for (a, b) in g.iter_mut().zip(delta) {
                *a += *b;
            }
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts between scalar precisions, dropping any gradient.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

/// Kaiming-uniform weight bound, `sqrt(6 / fan_in)`.
pub(crate) fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Default bias bound, `1 / sqrt(fan_in)`.
pub(crate) fn bias_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[inline]
pub(crate) fn debug_assert_finite<S: Scalar>(op: &str, data: &[S]) {
    debug_assert!(data.iter().all(|v| v.is_finite()), "{op} produced a non-finite value");
}
