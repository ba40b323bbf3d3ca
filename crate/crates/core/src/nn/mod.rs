//! Minimal neural-network kernels: layers with explicit forward/backward
//! passes, parameter storage, and the Adam optimizer.
//!
//! There is no tape; each layer caches what its own backward pass needs.
//! Every kernel is deterministic for a fixed input regardless of the rayon
//! thread count (parallel work is split into fixed-size chunks whose partial
//! results are reduced in a fixed order).

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod losses;
pub mod norm;
pub mod pool;

use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

/// How a forward pass should behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics in normalization layers; caches kept for backward.
    Train,
    /// Running statistics; no caches (pure inference).
    Eval,
    /// Running statistics but caches kept, so gradients w.r.t. activations
    /// can be taken in inference mode (Grad-CAM).
    EvalGrad,
}

impl ForwardMode {
    pub fn caches(self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }

    pub fn batch_stats(self) -> bool {
        matches!(self, ForwardMode::Train)
    }
}

/// A named, trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Accumulate `g` into the stored gradient (no-op allocation-wise).
    pub fn add_grad(&mut self, g: &ArrayViewD<'_, F>) {
        self.grad += g;
    }
}

/// Read-only view of a tensor for serialization (params and buffers alike).
pub struct NamedTensor<'a, F: Scalar> {
    pub name: String,
    pub view: ArrayViewD<'a, F>,
    /// false for non-learnable state such as batch-norm running statistics.
    pub is_param: bool,
}

/// Mutable view used when loading a checkpoint back into a model.
pub struct NamedTensorMut<'a, F: Scalar> {
    pub name: String,
    pub view: ArrayViewMutD<'a, F>,
}
