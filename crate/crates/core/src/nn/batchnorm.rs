use super::{check_grad_shape, missing_forward, Layer, LayerMode, Named, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalisation over `(N, H, W)` of an NHWC tensor.
///
/// Train mode normalises with batch statistics and folds them into the
/// running estimates as `running = momentum * running + (1 - momentum) * batch`
/// (biased batch variance). Infer mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar = f32> {
    gamma: Param<F>,
    beta: Param<F>,
    running_mean: Tensor<F>,
    running_var: Tensor<F>,
    momentum: F,
    eps: F,
    cache: Option<Cache<F>>,
}

#[derive(Debug, Clone)]
struct Cache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    shape: Vec<usize>,
    mode: LayerMode,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_hyper(channels, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_hyper(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::config(format!("batchnorm momentum {momentum} not in (0, 1)")));
        }
        if !(eps > 0.0) {
            return Err(Error::config("batchnorm eps must be positive"));
        }
        Ok(BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], F::one())?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], F::one())?,
            momentum: F::from_f64(momentum),
            eps: F::from_f64(eps),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_mut(&mut self) -> &mut Param<F> {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut Param<F> {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &Tensor<F> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor<F> {
        &self.running_var
    }

    fn batch_stats(&self, x: &[F], c: usize) -> (Vec<F>, Vec<F>) {
        let count = (x.len() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for px in x.chunks_exact(c) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for px in x.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (
            mean.into_iter().map(F::from_f64).collect(),
            var.into_iter().map(F::from_f64).collect(),
        )
    }
}

impl<F: Scalar> Layer<F> for BatchNorm2d<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        let s = x.shape4()?;
        let c = self.channels();
        if s.c != c {
            return Err(Error::size(format!(
                "batchnorm expects {c} channels, got {}",
                s.c
            )));
        }
        let (mean, var) = match mode {
            LayerMode::Train => {
                if s.pixels() < 2 {
                    return Err(Error::DegenerateBatch(
                        "batchnorm needs at least two values per channel in train mode".into(),
                    ));
                }
                let (mean, var) = self.batch_stats(x.data(), c);
                let keep = self.momentum;
                let blend = F::one() - keep;
                for (r, m) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + blend * *m;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + blend * *v;
                }
                (mean, var)
            }
            LayerMode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| (v + self.eps).sqrt().recip()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gamma[ch] * h + beta[ch]);
            }
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
            mode,
        });
        Tensor::from_vec(x.shape(), out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("batchnorm"))?;
        check_grad_shape("batchnorm", &cache.shape, grad)?;
        let c = self.channels();
        let count = F::from_f64((grad.len() / c) as f64);
        let gamma = self.gamma.value.data();

        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for (g, h) in grad.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] = dbeta[ch] + g[ch];
                dgamma[ch] = dgamma[ch] + g[ch] * h[ch];
            }
        }

        let mut dx = Vec::with_capacity(grad.len());
        match cache.mode {
            LayerMode::Train => {
                // dx = gamma * inv_std / M * (M * dy - sum(dy) - xhat * sum(dy * xhat))
                for (g, h) in grad.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        let scale = gamma[ch] * cache.inv_std[ch] / count;
                        dx.push(scale * (count * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
                    }
                }
            }
            LayerMode::Infer => {
                for g in grad.data().chunks_exact(c) {
                    for ch in 0..c {
                        dx.push(g[ch] * gamma[ch] * cache.inv_std[ch]);
                    }
                }
            }
        }
        self.gamma.grad = Tensor::from_vec(&[c], dgamma)?;
        self.beta.grad = Tensor::from_vec(&[c], dbeta)?;
        Tensor::from_vec(&cache.shape, dx)
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }

    fn buffers(&self) -> Vec<Named<&Tensor<F>>> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        vec![
            ("gamma".into(), &mut self.gamma.value),
            ("beta".into(), &mut self.beta.value),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}
