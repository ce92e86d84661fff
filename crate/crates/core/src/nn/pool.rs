use super::{check_grad_shape, missing_forward, Layer, LayerMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max pooling over `window x window` patches. Ties go to the first element
/// in row-major window order so the backward route is deterministic.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    window: usize,
    stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl Default for MaxPool2d {
    fn default() -> Self {
        MaxPool2d::new(2, 2)
    }
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        MaxPool2d {
            window,
            stride,
            cache: None,
        }
    }

    pub fn output_extent(&self, len: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 || len < self.window {
            return Err(Error::Geometry(format!(
                "cannot pool extent {len} with window {} stride {}",
                self.window, self.stride
            )));
        }
        Ok((len - self.window) / self.stride + 1)
    }
}

impl<F: Scalar> Layer<F> for MaxPool2d {
    fn forward(&mut self, x: &Tensor<F>, _mode: LayerMode) -> Result<Tensor<F>> {
        let s = x.shape4()?;
        let (ho, wo) = (self.output_extent(s.h)?, self.output_extent(s.w)?);
        let data = x.data();
        let mut out = Vec::with_capacity(s.n * ho * wo * s.c);
        let mut argmax = Vec::with_capacity(out.capacity());
        for n in 0..s.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..s.c {
                        let mut best = usize::MAX;
                        for ky in 0..self.window {
                            for kx in 0..self.window {
                                let y = oy * self.stride + ky;
                                let xx = ox * self.stride + kx;
                                let idx = ((n * s.h + y) * s.w + xx) * s.c + ch;
                                if best == usize::MAX || data[idx] > data[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        self.cache = Some((argmax, x.shape().to_vec()));
        Tensor::from_vec(&[s.n, ho, wo, s.c], out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let (argmax, in_shape) = self.cache.as_ref().ok_or_else(|| missing_forward("maxpool"))?;
        if grad.len() != argmax.len() {
            check_grad_shape("maxpool", &[argmax.len()], grad)?;
        }
        let mut dx = Tensor::zeros(in_shape)?;
        let d = dx.data_mut();
        for (&idx, &g) in argmax.iter().zip(grad.data()) {
            d[idx] = d[idx] + g;
        }
        Ok(dx)
    }
}
