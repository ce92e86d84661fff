use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_grad_shape, missing_forward, Layer, LayerMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; infer mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<F: Scalar = f32> {
    rate: f64,
    rng: ChaCha8Rng,
    mask: Option<(Vec<F>, Vec<usize>)>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Restarts the mask stream; two forwards after the same reseed draw the same mask.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

impl<F: Scalar> Layer<F> for Dropout<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        if mode == LayerMode::Infer || self.rate == 0.0 {
            self.mask = Some((vec![F::one(); x.len()], x.shape().to_vec()));
            return Ok(x.clone());
        }
        let keep = F::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<F> = (0..x.len())
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some((mask, x.shape().to_vec()));
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let (mask, shape) = self.mask.as_ref().ok_or_else(|| missing_forward("dropout"))?;
        check_grad_shape("dropout", shape, grad)?;
        let dx = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_vec(shape, dx)
    }
}
