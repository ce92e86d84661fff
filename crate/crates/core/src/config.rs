//! Plain-text `key = value` configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. List
//! values are comma separated (`block_filters = 64,128,128,256`). Every key
//! must belong to the schema of the section it is applied to.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::ensemble::FusionParams;
use crate::error::{Error, Result};
use crate::mlsam::DEFAULT_KERNELS;
use crate::training::TrainConfig;

/// Kernel sizes of the parallel stem convolutions.
pub const STEM_KERNELS: [usize; 3] = [3, 5, 7];

/// Splits config text into `(line_number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Architecture description; the defaults reproduce the 224x224 network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    /// Filters per parallel stem convolution.
    pub branch_filters: usize,
    /// Filters of the conv/BN/ReLU/pool blocks after the attention stage.
    pub block_filters: Vec<usize>,
    pub dense_units: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub mlsam_kernels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 224,
            input_w: 224,
            input_c: 3,
            branch_filters: 32,
            block_filters: vec![64, 128, 128, 256],
            dense_units: 256,
            num_classes: 2,
            dropout_rate: 0.6,
            mlsam_kernels: DEFAULT_KERNELS.to_vec(),
        }
    }
}

impl ModelConfig {
    /// Small 32x32 variant used for CPU-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            input_h: 32,
            input_w: 32,
            branch_filters: 8,
            block_filters: vec![16, 32, 32, 64],
            dense_units: 32,
            ..ModelConfig::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "input_h",
        "input_w",
        "input_c",
        "branch_filters",
        "block_filters",
        "dense_units",
        "num_classes",
        "dropout_rate",
        "mlsam_kernels",
    ];

    /// Applies one key; returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_h" => self.input_h = parse_value(key, value)?,
            "input_w" => self.input_w = parse_value(key, value)?,
            "input_c" => self.input_c = parse_value(key, value)?,
            "branch_filters" => self.branch_filters = parse_value(key, value)?,
            "block_filters" => self.block_filters = parse_list(key, value)?,
            "dense_units" => self.dense_units = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "mlsam_kernels" => self.mlsam_kernels = parse_list(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Number of 2x2 pooling stages (stem plus one per block).
    pub fn pooling_stages(&self) -> usize {
        1 + self.block_filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.pooling_stages();
        for (name, v) in [("input_h", self.input_h), ("input_w", self.input_w)] {
            if v == 0 || v % div != 0 {
                return Err(Error::config(format!(
                    "{name} = {v} is not divisible by {div} ({} pooling stages)",
                    self.pooling_stages()
                )));
            }
        }
        let positive = [
            ("input_c", self.input_c),
            ("branch_filters", self.branch_filters),
            ("dense_units", self.dense_units),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.block_filters.contains(&0) {
            return Err(Error::config("block_filters entries must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.mlsam_kernels.is_empty() || self.mlsam_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config(format!(
                "mlsam_kernels must be a non-empty list of odd sizes, got {:?}",
                self.mlsam_kernels
            )));
        }
        Ok(())
    }

    /// Length of the flattened feature vector entering the dense head.
    pub fn flatten_len(&self) -> usize {
        let div = 1usize << self.pooling_stages();
        let channels = self
            .block_filters
            .last()
            .copied()
            .unwrap_or(self.branch_filters * STEM_KERNELS.len());
        (self.input_h / div) * (self.input_w / div) * channels
    }

    pub fn write_pairs(&self, out: &mut String) {
        let _ = writeln!(out, "input_h = {}", self.input_h);
        let _ = writeln!(out, "input_w = {}", self.input_w);
        let _ = writeln!(out, "input_c = {}", self.input_c);
        let _ = writeln!(out, "branch_filters = {}", self.branch_filters);
        let _ = writeln!(out, "block_filters = {}", join(&self.block_filters));
        let _ = writeln!(out, "dense_units = {}", self.dense_units);
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        // {:?} on f64 round-trips exactly
        let _ = writeln!(out, "dropout_rate = {:?}", self.dropout_rate);
        let _ = writeln!(out, "mlsam_kernels = {}", join(&self.mlsam_kernels));
    }
}

/// Everything a command can configure: architecture, training and fusion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionParams,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? || self.fusion.set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key `{key}`")))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_pairs(text)? {
            self.set(&key, &value)
                .map_err(|e| Error::config(format!("line {line}: {}", strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.model.write_pairs(&mut out);
        self.train.write_pairs(&mut out);
        self.fusion.write_pairs(&mut out);
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let cfg = RunConfig::from_text(
            "# desk run\ninput_h = 32\ninput_w=32 # inline\n\nblock_filters = 16, 32,32,64\nlearning_rate = 0.001\nalpha = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.model.input_h, 32);
        assert_eq!(cfg.model.block_filters, vec![16, 32, 32, 64]);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.fusion.alpha, 0.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("learning_rte = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rte"));
    }

    #[test]
    fn missing_equals_is_config_error() {
        assert!(RunConfig::from_text("dense_units 12").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        };
        cfg.model.dropout_rate = 0.1 + 0.2;
        cfg.train.seed = 99;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn divisibility_rule() {
        let cfg = ModelConfig {
            input_h: 100,
            input_w: 100,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn flatten_lengths() {
        assert_eq!(ModelConfig::default().flatten_len(), 7 * 7 * 256);
        assert_eq!(ModelConfig::desk().flatten_len(), 64);
    }
}
