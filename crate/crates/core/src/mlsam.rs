//! Multi-kernel spatial attention.
//!
//! Parallel same-padded convolutions (3x3, 5x5, 7x7 by default, four output
//! channels each) look at the feature map at several scales. Their
//! concatenation is fused by a 3x3 convolution down to a single channel and
//! squashed with a sigmoid into an attention map in (0, 1), which then gates
//! every channel of the input by elementwise multiplication.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image;
use crate::nn::{prefixed, Conv2d, Layer, LayerMode, Named, Param, ParallelConv, Sigmoid};
use crate::tensor::{broadcast_mul, broadcast_mul_backward, Scalar, Tensor};

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];
/// Output channels of each localisation branch.
pub const BRANCH_CHANNELS: usize = 4;
const FUSE_KERNEL: usize = 3;

#[derive(Debug, Clone)]
pub struct MlsamBlock<F: Scalar = f32> {
    branches: ParallelConv<F>,
    fuse: Conv2d<F>,
    gate: Sigmoid<F>,
    in_channels: usize,
    cache: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> MlsamBlock<F> {
    pub fn new<R: Rng>(in_channels: usize, kernels: &[usize], rng: &mut R) -> Result<Self> {
        let branches = ParallelConv::new(kernels, in_channels, BRANCH_CHANNELS, rng)?;
        let fuse = Conv2d::same(FUSE_KERNEL, branches.out_channels(), 1, rng)?;
        Ok(MlsamBlock {
            branches,
            fuse,
            gate: Sigmoid::new(),
            in_channels,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn branches(&self) -> &ParallelConv<F> {
        &self.branches
    }

    pub fn fuse(&self) -> &Conv2d<F> {
        &self.fuse
    }

    pub fn fuse_mut(&mut self) -> &mut Conv2d<F> {
        &mut self.fuse
    }

    /// Attention map `[N, H, W, 1]` from the most recent forward pass.
    pub fn attention(&self) -> Option<&Tensor<F>> {
        self.cache.as_ref().map(|(_, a)| a)
    }

    /// Returns `(attended, attention)`.
    pub fn forward_with_attention(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<(Tensor<F>, Tensor<F>)> {
        let s = x.shape4()?;
        if s.c != self.in_channels {
            return Err(Error::size(format!(
                "attention block expects {} channels, got {}",
                self.in_channels, s.c
            )));
        }
        let multi = self.branches.forward(x, mode)?;
        let logits = self.fuse.forward(&multi, mode)?;
        let attention = self.gate.forward(&logits, mode)?.map(open_unit);
        let attended = broadcast_mul(x, &attention)?;
        self.cache = Some((x.clone(), attention.clone()));
        Ok((attended, attention))
    }
}

impl<F: Scalar> Layer<F> for MlsamBlock<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        self.forward_with_attention(x, mode).map(|(out, _)| out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let (x, attention) = self
            .cache
            .as_ref()
            .ok_or_else(|| crate::nn::missing_forward("attention block"))?;
        // x feeds both the gate product and the attention branches
        let (dx_direct, dattention) = broadcast_mul_backward(x, attention, grad)?;
        let dlogits = self.gate.backward(&dattention)?;
        let dmulti = self.fuse.backward(&dlogits)?;
        let dx_branches = self.branches.backward(&dmulti)?;
        dx_direct.zip_map(&dx_branches, |a, b| a + b)
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        let mut out: Vec<_> = prefixed("branch", self.branches.params()).collect();
        out.extend(prefixed("fuse", self.fuse.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        let mut out: Vec<_> = prefixed("branch", self.branches.params_mut()).collect();
        out.extend(prefixed("fuse", self.fuse.params_mut()));
        out
    }
}

/// Keeps a saturated sigmoid strictly inside (0, 1): past a logit of about 37
/// (f64) or 17 (f32) it rounds to exactly 1, and far below zero it underflows.
fn open_unit<F: Scalar>(v: F) -> F {
    let below_one = F::one() - F::epsilon() / F::from_f64(2.0);
    v.max(F::min_positive_value()).min(below_one)
}

/// Quantises a single-sample attention map to 8-bit gray (`round(255 * v)`,
/// halves rounded up, values clamped to [0, 1] first). Returns `(width, height, pixels)`.
pub fn quantize_attention<F: Scalar>(attention: &Tensor<F>) -> Result<(usize, usize, Vec<u8>)> {
    let s = attention.shape4()?;
    if s.n != 1 || s.c != 1 {
        return Err(Error::size(format!(
            "attention export needs a [1, H, W, 1] map, got {:?}",
            attention.shape()
        )));
    }
    let pixels = attention
        .data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (255.0 * v + 0.5).floor() as u8
        })
        .collect();
    Ok((s.w, s.h, pixels))
}

/// Writes an attention map as a binary PGM (P5, maxval 255).
pub fn export_attention<F: Scalar>(attention: &Tensor<F>, path: &Path) -> Result<()> {
    let (w, h, pixels) = quantize_attention(attention)?;
    image::write_pgm(path, w, h, &pixels)
}
