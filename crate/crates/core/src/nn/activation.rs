use super::{check_grad_shape, missing_forward, Layer, LayerMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(0, x)`; the gradient at exactly zero is taken as zero.
#[derive(Debug, Clone, Default)]
pub struct Relu<F: Scalar = f32> {
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Relu { input: None }
    }
}

impl<F: Scalar> Layer<F> for Relu<F> {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        self.input = Some(x.clone());
        Ok(x.map(|v| v.max(F::zero())))
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or_else(|| missing_forward("relu"))?;
        check_grad_shape("relu", x.shape(), grad)?;
        x.zip_map(grad, |v, g| if v > F::zero() { g } else { F::zero() })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F: Scalar = f32> {
    output: Option<Tensor<F>>,
}

impl<F: Scalar> Sigmoid<F> {
    pub fn new() -> Self {
        Sigmoid { output: None }
    }
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    // split by sign so exp never overflows
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Layer<F> for Sigmoid<F> {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        let y = x.map(sigmoid);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.output.as_ref().ok_or_else(|| missing_forward("sigmoid"))?;
        check_grad_shape("sigmoid", y.shape(), grad)?;
        y.zip_map(grad, |s, g| g * s * (F::one() - s))
    }
}

/// Softmax over the last axis with max subtraction.
#[derive(Debug, Clone, Default)]
pub struct Softmax<F: Scalar = f32> {
    output: Option<Tensor<F>>,
}

impl<F: Scalar> Softmax<F> {
    pub fn new() -> Self {
        Softmax { output: None }
    }
}

pub(crate) fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let k = *x
        .shape()
        .last()
        .ok_or_else(|| Error::size("softmax of a scalar"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::from_vec(x.shape(), out)
}

impl<F: Scalar> Layer<F> for Softmax<F> {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        let y = softmax_rows(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.output.as_ref().ok_or_else(|| missing_forward("softmax"))?;
        check_grad_shape("softmax", y.shape(), grad)?;
        let k = *y.shape().last().unwrap_or(&1);
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.data().chunks_exact(k).zip(grad.data().chunks_exact(k)) {
            let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
        }
        Tensor::from_vec(y.shape(), dx)
    }
}
