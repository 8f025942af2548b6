//! SELU and RELU, forward and backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// SELU constants. The defaults are the fixed-point solution for
/// zero-mean / unit-variance activations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeluParams {
    alpha: f64,
    lambda: f64,
}

impl SeluParams {
    pub const ALPHA: f64 = 1.6732632423543772;
    pub const LAMBDA: f64 = 1.0507009873554805;

    pub const STANDARD: SeluParams = SeluParams {
        alpha: Self::ALPHA,
        lambda: Self::LAMBDA,
    };

    /// Both constants must exceed one: `alpha > 1` lets the negative branch
    /// pull the mean down, `lambda > 1` gives a slope that can grow variance.
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha > 1.0 && lambda > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "SELU needs alpha > 1 and lambda > 1, got alpha={alpha}, lambda={lambda}"
            )));
        }
        Ok(SeluParams { alpha, lambda })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn apply<T: Scalar>(&self, x: T) -> T {
        let lambda = T::from_f64(self.lambda);
        if x > T::zero() {
            lambda * x
        } else {
            let la = T::from_f64(self.lambda * self.alpha);
            la * x.exp_nonpos() - la
        }
    }

    /// Derivative; at exactly zero the negative branch (`lambda * alpha`) is used.
    #[inline]
    pub fn derivative<T: Scalar>(&self, x: T) -> T {
        let lambda = T::from_f64(self.lambda);
        if x > T::zero() {
            lambda
        } else {
            T::from_f64(self.lambda * self.alpha) * x.exp_nonpos()
        }
    }
}

impl Default for SeluParams {
    fn default() -> Self {
        Self::STANDARD
    }
}

// Written as `lambda * max(x, 0) + (lambda alpha e^min(x, 0) - lambda alpha)`:
// one of the two terms is exactly zero, so the values equal `apply` while the
// loop has no data-dependent control flow and vectorizes.
pub fn selu_forward<T: Scalar>(x: &Tensor<T>, p: &SeluParams) -> Tensor<T> {
    let lambda = T::from_f64(p.lambda);
    let la = T::from_f64(p.lambda * p.alpha);
    let mut out = vec![T::zero(); x.len()];
    for (o, &v) in out.iter_mut().zip(x.data()) {
        let pos = if v > T::zero() { v } else { T::zero() };
        let nonpos = if v > T::zero() { T::zero() } else { v };
        *o = lambda * pos + (la * nonpos.exp_nonpos() - la);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub fn selu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, p: &SeluParams) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::dim("selu_backward", x.shape(), grad_out.shape()));
    }
    let lambda = T::from_f64(p.lambda);
    let la = T::from_f64(p.lambda * p.alpha);
    let mut out = vec![T::zero(); x.len()];
    for ((o, &v), &g) in out.iter_mut().zip(x.data()).zip(grad_out.data()) {
        let nonpos = if v > T::zero() { T::zero() } else { v };
        let neg = la * nonpos.exp_nonpos();
        *o = g * if v > T::zero() { lambda } else { neg };
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Activation choice for a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
}

impl Activation {
    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu_forward(x),
            Activation::Selu => selu_forward(x, &SeluParams::STANDARD),
        }
    }

    pub fn backward<T: Scalar>(self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => relu_backward(x, grad_out),
            Activation::Selu => selu_backward(x, grad_out, &SeluParams::STANDARD),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
        }
    }
}
