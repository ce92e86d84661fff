//! Self-describing binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TFN1" | u32 version | u32 config_len | config text (key = value lines)
//! u32 tensor_count | per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data
//! ```
//!
//! The config text carries the architecture plus `seed`, `epochs_trained`
//! and `class_names`, so a file can be loaded without any other input.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::{parse_list, parse_pairs, parse_value, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{ModelMeta, TFusionModel};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TFN1";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<F: Scalar>(model: &TFusionModel<F>) -> Vec<u8> {
    let mut text = String::new();
    model.config().write_pairs(&mut text);
    let _ = writeln!(text, "seed = {}", model.meta.seed);
    let _ = writeln!(text, "epochs_trained = {}", model.meta.epochs_trained);
    let _ = writeln!(text, "class_names = {}", model.meta.class_names.join(","));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let state = model.state();
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in state {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save<F: Scalar>(model: &TFusionModel<F>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, tensor: Option<&str>, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(tensor, format!("truncated while reading {what}"))),
        }
    }

    fn u8(&mut self, tensor: Option<&str>, what: &str) -> Result<u8> {
        Ok(self.take(1, tensor, what)?[0])
    }

    fn u16(&mut self, tensor: Option<&str>, what: &str) -> Result<u16> {
        let b = self.take(2, tensor, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, tensor: Option<&str>, what: &str) -> Result<u32> {
        let b = self.take(4, tensor, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_header_config(text: &str) -> Result<(ModelConfig, ModelMeta)> {
    let mut config = ModelConfig::default();
    let mut meta = ModelMeta::default();
    let bad = |e: Error| Error::format(None, format!("embedded config: {e}"));
    for (_, key, value) in parse_pairs(text).map_err(bad)? {
        if config.set(&key, &value).map_err(bad)? {
            continue;
        }
        match key.as_str() {
            "seed" => meta.seed = parse_value(&key, &value).map_err(bad)?,
            "epochs_trained" => meta.epochs_trained = parse_value(&key, &value).map_err(bad)?,
            "class_names" => meta.class_names = parse_list(&key, &value).map_err(bad)?,
            _ => return Err(Error::format(None, format!("unknown embedded config key `{key}`"))),
        }
    }
    config.validate().map_err(bad)?;
    Ok((config, meta))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TFusionModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, None, "magic")? != MAGIC {
        return Err(Error::format(None, "bad magic bytes (not a model checkpoint)"));
    }
    let version = r.u32(None, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = r.u32(None, "config length")? as usize;
    let text = std::str::from_utf8(r.take(config_len, None, "config text")?)
        .map_err(|_| Error::format(None, "config text is not UTF-8"))?;
    let (config, meta) = parse_header_config(text)?;

    let mut model = TFusionModel::<f32>::build(&config, meta.seed)?;
    model.meta = meta;
    let mut slots: HashMap<String, &mut Tensor<f32>> = model.state_mut().into_iter().collect();
    let expected = slots.len();
    let count = r.u32(None, "tensor count")? as usize;
    if count != expected {
        return Err(Error::format(
            None,
            format!("checkpoint holds {count} tensors, architecture needs {expected}"),
        ));
    }
    for _ in 0..count {
        let name_len = r.u16(None, "tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, None, "tensor name")?)
            .map_err(|_| Error::format(None, "tensor name is not UTF-8"))?
            .to_string();
        let tag = Some(name.as_str());
        let ndim = r.u8(tag, "rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32(tag, "dimensions").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let slot = slots
            .remove(&name)
            .ok_or_else(|| Error::format(tag, "unexpected or duplicate tensor"))?;
        if dims != slot.shape() {
            return Err(Error::format(
                tag,
                format!("shape {dims:?} does not match architecture {:?}", slot.shape()),
            ));
        }
        let raw = r.take(slot.len() * 4, tag, "tensor data")?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(None, "trailing bytes after last tensor"));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<TFusionModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerMode;

    fn tiny_model() -> TFusionModel<f32> {
        let cfg = ModelConfig {
            input_h: 8,
            input_w: 8,
            branch_filters: 2,
            block_filters: vec![3, 4],
            dense_units: 5,
            ..ModelConfig::default()
        };
        let mut m = TFusionModel::build(&cfg, 17).unwrap();
        m.meta.epochs_trained = 3;
        m.meta.class_names = vec!["covid".into(), "non_covid".into()];
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = tiny_model();
        let x = Tensor::from_vec(&[2, 8, 8, 3], (0..384).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        // move running stats away from their initial values
        m.forward(&x, LayerMode::Train).unwrap();
        let bytes = to_bytes(&m);
        let mut back = from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, m.meta);
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(
            back.forward(&x, LayerMode::Infer).unwrap(),
            m.forward(&x, LayerMode::Infer).unwrap()
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&tiny_model());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { tensor: None, .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&tiny_model());
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = to_bytes(&tiny_model());
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { tensor: Some(name), .. } => assert!(name.ends_with("running_var"), "{name}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = to_bytes(&tiny_model());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { .. })));
    }
}
