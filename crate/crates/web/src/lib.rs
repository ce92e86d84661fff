//! WebAssembly bindings for the static demo page in `www/`.

mod demo;

pub use demo::{fuse, resize_rgb, to_rgba, Analysis, Explorer, Fusion, BUNDLED_MODEL};

use tfusion::synthetic::render_seeded;
use tfusion::FusionParams;
use wasm_bindgen::prelude::*;

fn js(e: tfusion::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct AttentionExplorer {
    inner: Explorer,
}

#[wasm_bindgen]
impl AttentionExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<AttentionExplorer, JsError> {
        Ok(AttentionExplorer {
            inner: Explorer::bundled().map_err(js)?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.inner.size()
    }

    #[wasm_bindgen(js_name = classNames)]
    pub fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    #[wasm_bindgen(js_name = setGateShift)]
    pub fn set_gate_shift(&mut self, shift: f32) {
        self.inner.set_gate_shift(shift);
    }

    pub fn analyse(&mut self, rgb: &[u8]) -> Result<Analysis, JsError> {
        self.inner.analyse(rgb).map_err(js)
    }
}

/// One synthetic sample (0 = blob, 1 = ring) as raw RGB bytes.
#[wasm_bindgen(js_name = synthSample)]
pub fn synth_sample(class: usize, size: usize, noise: f64, seed: u32) -> Vec<u8> {
    render_seeded(class, size, noise, u64::from(seed))
}

#[wasm_bindgen(js_name = fuzzyFuse)]
pub fn fuzzy_fuse(probs: &[f64], members: usize, alpha: f64, epsilon: f64, bias: f64) -> Result<Fusion, JsError> {
    fuse(probs, members, FusionParams { alpha, epsilon, bias }).map_err(js)
}

#[wasm_bindgen(js_name = resizePreview)]
pub fn resize_preview(rgb: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<u8>, JsError> {
    resize_rgb(rgb, width, height, out_w, out_h).map(|p| to_rgba(&p, 3)).map_err(js)
}

#[wasm_bindgen(js_name = toRgba)]
pub fn to_rgba_js(pixels: &[u8], channels: usize) -> Vec<u8> {
    to_rgba(pixels, channels)
}
