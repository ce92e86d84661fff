use rand::Rng;

use super::{check_grad_shape, he_normal, missing_forward, Layer, LayerMode, Named, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm_into, MatView, Scalar, Tensor};

/// Fully connected layer `y = x W + b` with `W: [Din, Dout]`.
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar = f32> {
    weight: Param<F>,
    bias: Param<F>,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> Result<Self> {
        let weight = he_normal(rng, &[din, dout], din)?;
        Self::from_tensors(weight, Tensor::zeros(&[dout])?)
    }

    pub fn from_tensors(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        let (_, dout) = weight.shape2()?;
        if bias.shape() != [dout] {
            return Err(Error::size(format!(
                "dense bias {:?} does not match {dout} outputs",
                bias.shape()
            )));
        }
        Ok(Dense {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl<F: Scalar> Layer<F> for Dense<F> {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        let (n, din) = x.shape2()?;
        let (wi, dout) = (self.in_features(), self.out_features());
        if din != wi {
            return Err(Error::size(format!(
                "dense expects {wi} input features, got {din}"
            )));
        }
        let mut out: Vec<F> = self.bias.value.data().iter().copied().cycle().take(n * dout).collect();
        gemm_into(
            MatView::row_major(x.data(), n, din),
            MatView::row_major(self.weight.value.data(), din, dout),
            F::one(),
            &mut out,
        );
        self.cache = Some(x.clone());
        Tensor::from_vec(&[n, dout], out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("dense"))?;
        let (n, din) = x.shape2()?;
        let dout = self.out_features();
        check_grad_shape("dense", &[n, dout], grad)?;
        let g = MatView::row_major(grad.data(), n, dout);

        let mut dw = vec![F::zero(); din * dout];
        gemm_into(MatView::row_major(x.data(), n, din).t(), g, F::zero(), &mut dw);
        let mut db = vec![F::zero(); dout];
        for row in grad.data().chunks_exact(dout) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
        }
        let mut dx = vec![F::zero(); n * din];
        gemm_into(
            g,
            MatView::row_major(self.weight.value.data(), din, dout).t(),
            F::zero(),
            &mut dx,
        );
        self.weight.grad = Tensor::from_vec(&[din, dout], dw)?;
        self.bias.grad = Tensor::from_vec(&[dout], db)?;
        Tensor::from_vec(&[n, din], dx)
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}
