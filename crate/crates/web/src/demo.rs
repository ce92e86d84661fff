//! Plain Rust side of the demo, kept free of JS types so it runs under `cargo test`.

use tfusion::ensemble::elementwise_max;
use tfusion::image::{normalize, resize_bilinear};
use tfusion::mlsam::quantize_attention;
use tfusion::nn::LayerMode;
use tfusion::tensor::argmax_rows;
use tfusion::{checkpoint, fuzzy_max_fuse, Error, FusionParams, Result, TFusionModel, Tensor};
use wasm_bindgen::prelude::*;

/// Desk model trained on the synthetic blob/ring task.
pub static BUNDLED_MODEL: &[u8] = include_bytes!("../assets/desk.tfn");

pub struct Explorer {
    model: TFusionModel<f32>,
    base_bias: f32,
}

impl Explorer {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let model = checkpoint::from_bytes(bytes)?;
        let base_bias = model.attention_block().fuse().bias().value.data()[0];
        Ok(Explorer { model, base_bias })
    }

    pub fn bundled() -> Result<Self> {
        Self::from_bytes(BUNDLED_MODEL)
    }

    /// Input side length; the bundled model is square.
    pub fn size(&self) -> usize {
        self.model.config().input_h
    }

    pub fn class_names(&self) -> &[String] {
        &self.model.meta.class_names
    }

    /// Offsets the attention logit bias; positive values open the gate everywhere.
    pub fn set_gate_shift(&mut self, shift: f32) {
        self.model.attention_block_mut().fuse_mut().bias_mut().value.data_mut()[0] = self.base_bias + shift;
    }

    /// Class probabilities and the attention map of one raw RGB image.
    pub fn analyse(&mut self, rgb: &[u8]) -> Result<Analysis> {
        let s = self.size();
        if rgb.len() != s * s * 3 {
            return Err(Error::Size(format!("expected {s}x{s} RGB ({} bytes), got {}", s * s * 3, rgb.len())));
        }
        let raw = Tensor::from_vec(&[1, s, s, 3], rgb.iter().map(|&b| f32::from(b)).collect())?;
        let x = normalize(&raw);
        let probabilities = self.model.forward(&x, LayerMode::Infer)?.into_vec();
        let (_, _, attention) = quantize_attention(&self.model.attention_map(&x)?)?;
        Ok(Analysis { probabilities, attention })
    }
}

#[wasm_bindgen]
pub struct Analysis {
    probabilities: Vec<f32>,
    attention: Vec<u8>,
}

#[wasm_bindgen]
impl Analysis {
    #[wasm_bindgen(getter)]
    pub fn probabilities(&self) -> Vec<f32> {
        self.probabilities.clone()
    }

    /// Attention as 8-bit gray, one byte per pixel.
    #[wasm_bindgen(getter)]
    pub fn attention(&self) -> Vec<u8> {
        self.attention.clone()
    }
}

#[wasm_bindgen]
pub struct Fusion {
    maximum: Vec<f64>,
    fused: Vec<f64>,
    winner: usize,
}

#[wasm_bindgen]
impl Fusion {
    /// Per-class maximum over members.
    #[wasm_bindgen(getter)]
    pub fn maximum(&self) -> Vec<f64> {
        self.maximum.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn fused(&self) -> Vec<f64> {
        self.fused.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn winner(&self) -> usize {
        self.winner
    }
}

/// Fuses `members` probability rows for one sample, given row-major as `members * K` values.
pub fn fuse(probs: &[f64], members: usize, params: FusionParams) -> Result<Fusion> {
    params.validate()?;
    if members == 0 || probs.is_empty() || !probs.len().is_multiple_of(members) {
        return Err(Error::Size(format!("{} values do not split into {members} members", probs.len())));
    }
    let k = probs.len() / members;
    let rows = probs
        .chunks(k)
        .map(|row| Tensor::from_vec(&[1, k], row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuzzy_max_fuse(&rows, &params)?;
    Ok(Fusion {
        maximum: elementwise_max(&rows)?.into_vec(),
        winner: argmax_rows(&fused)?[0],
        fused: fused.into_vec(),
    })
}

/// Bilinear resize of a raw RGB image, rounded back to bytes.
pub fn resize_rgb(rgb: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<u8>> {
    let img = Tensor::from_vec(&[height, width, 3], rgb.iter().map(|&b| f32::from(b)).collect())?;
    let out = resize_bilinear(&img, out_h, out_w)?;
    Ok(out.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
}

/// Expands RGB or gray bytes to the RGBA layout canvas `ImageData` expects.
pub fn to_rgba(pixels: &[u8], channels: usize) -> Vec<u8> {
    pixels
        .chunks(channels.max(1))
        .flat_map(|px| match *px {
            [r, g, b] => [r, g, b, 255],
            [v] => [v, v, v, 255],
            _ => [0, 0, 0, 255],
        })
        .collect()
}
