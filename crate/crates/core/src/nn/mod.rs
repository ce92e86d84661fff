//! Differentiable layers with hand-derived backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`; calling
//! `backward` without a preceding `forward` is a [`Error::State`](crate::Error::State).
//! Parameter gradients are overwritten (not accumulated) by each backward call.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod direct;
mod dropout;
mod loss;
mod pool;

pub use activation::{Relu, Sigmoid, Softmax};
pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, ParallelConv};
pub use dense::Dense;
pub use dropout::Dropout;
pub use loss::{cce_loss, softmax_cce_grad, PROB_FLOOR};
pub use pool::MaxPool2d;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// BatchNorm and Dropout behave differently per mode; every other layer ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerMode {
    #[default]
    Train,
    Infer,
}

/// A trainable tensor and the gradient from the most recent backward pass.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar = f32> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = value.map(|_| F::zero());
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub type Named<T> = (String, T);

pub trait Layer<F: Scalar> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>>;

    /// Returns the gradient with respect to the last forward input and stores
    /// parameter gradients in the layer's [`Param`]s.
    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>>;

    fn params(&self) -> Vec<Named<&Param<F>>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        Vec::new()
    }

    /// Non-trainable state that must survive a checkpoint (BatchNorm running statistics).
    fn buffers(&self) -> Vec<Named<&Tensor<F>>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        Vec::new()
    }

    /// Parameter values and buffers together, for loading checkpoints.
    fn state_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        self.params_mut()
            .into_iter()
            .map(|(n, p)| (n, &mut p.value))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn prefixed<'a, T: 'a>(prefix: &'a str, items: Vec<Named<T>>) -> impl Iterator<Item = Named<T>> + 'a {
    items
        .into_iter()
        .map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

/// Zero-mean normal weights with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn he_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor<F>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::from_vec(shape, data)
}

pub(crate) fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before forward"))
}

pub(crate) fn check_grad_shape<F: Scalar>(layer: &str, expected: &[usize], grad: &Tensor<F>) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::size(format!(
            "{layer}: upstream gradient {:?} does not match output {expected:?}",
            grad.shape()
        )));
    }
    Ok(())
}
