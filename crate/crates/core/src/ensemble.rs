//! Fuzzy max fusion of homogeneous model outputs.
//!
//! Member softmax outputs are read as class membership values. The fused
//! score is an affine map of the per-class maximum over members:
//! `F = alpha * max_m P_m + epsilon + bias`. Scores are not renormalised;
//! only their argmax is used for prediction.

use std::fmt::Write as _;

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::model::TFusionModel;
use crate::nn::LayerMode;
use crate::parallel;
use crate::tensor::{argmax_rows, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Weight on the member maximum; must be positive so argmax is preserved.
    pub alpha: f64,
    pub epsilon: f64,
    /// Constant offset `B`.
    pub bias: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            alpha: 0.8,
            epsilon: 0.0001,
            bias: 20.0,
        }
    }
}

impl FusionParams {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "bias" => self.bias = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.epsilon.is_finite() || !self.bias.is_finite() {
            return Err(Error::config("epsilon and bias must be finite"));
        }
        Ok(())
    }

    pub fn write_pairs(&self, out: &mut String) {
        let _ = writeln!(out, "alpha = {:?}", self.alpha);
        let _ = writeln!(out, "epsilon = {:?}", self.epsilon);
        let _ = writeln!(out, "bias = {:?}", self.bias);
    }
}

/// Per-class elementwise maximum over members, `[N, K]`.
pub fn elementwise_max<F: Scalar>(member_probs: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::config("fusion needs at least one member"))?;
    first.shape2()?;
    member_probs[1..].iter().try_fold(first.clone(), |acc, p| {
        if p.shape() != first.shape() {
            return Err(Error::size(format!(
                "member output {:?} differs from {:?}",
                p.shape(),
                first.shape()
            )));
        }
        acc.zip_map(p, F::max)
    })
}

pub fn fuzzy_max_fuse<F: Scalar>(member_probs: &[Tensor<F>], params: &FusionParams) -> Result<Tensor<F>> {
    let max = elementwise_max(member_probs)?;
    let alpha = F::from_f64(params.alpha);
    let offset = F::from_f64(params.epsilon) + F::from_f64(params.bias);
    Ok(max.map(|m| alpha * m + offset))
}

/// [`fuzzy_max_fuse`] evaluated in f64. With `bias = 20` an f32 score has a
/// resolution near 2e-6, enough to merge close maxima into a tie; widening
/// first keeps the argmax of the member maximum exactly.
pub fn fused_scores<F: Scalar>(member_probs: &[Tensor<F>], params: &FusionParams) -> Result<Tensor<f64>> {
    let wide: Vec<Tensor<f64>> = member_probs.iter().map(Tensor::cast).collect();
    fuzzy_max_fuse(&wide, params)
}

/// Frozen members evaluated in inference mode and fused.
#[derive(Debug)]
pub struct EnsembleModel<F: Scalar = f32> {
    members: Vec<TFusionModel<F>>,
    pub params: FusionParams,
}

impl<F: Scalar> EnsembleModel<F> {
    pub fn new(members: Vec<TFusionModel<F>>, params: FusionParams) -> Result<Self> {
        params.validate()?;
        let first = members
            .first()
            .ok_or_else(|| Error::config("an ensemble needs at least one member"))?
            .config();
        for (i, m) in members.iter().enumerate().skip(1) {
            let c = m.config();
            if (c.input_h, c.input_w, c.input_c, c.num_classes)
                != (first.input_h, first.input_w, first.input_c, first.num_classes)
            {
                return Err(Error::config(format!(
                    "member {i} has input {}x{}x{} / {} classes, member 0 has {}x{}x{} / {}",
                    c.input_h, c.input_w, c.input_c, c.num_classes,
                    first.input_h, first.input_w, first.input_c, first.num_classes
                )));
            }
        }
        Ok(EnsembleModel { members, params })
    }

    pub fn members(&self) -> &[TFusionModel<F>] {
        &self.members
    }

    /// Inference-mode probabilities of every member, in member order.
    pub fn member_probs(&mut self, batch: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let members: Vec<&mut TFusionModel<F>> = self.members.iter_mut().collect();
        parallel::map(members, |m| m.forward(batch, LayerMode::Infer))
            .into_iter()
            .collect()
    }

    /// Returns `(labels, fused_scores)`; labels are the argmax of the fused scores.
    pub fn predict(&mut self, batch: &Tensor<F>) -> Result<(Vec<usize>, Tensor<f64>)> {
        let probs = self.member_probs(batch)?;
        let fused = fused_scores(&probs, &self.params)?;
        Ok((argmax_rows(&fused)?, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[f64], k: usize) -> Tensor<f64> {
        Tensor::from_vec(&[v.len() / k, k], v.to_vec()).unwrap()
    }

    #[test]
    fn single_certain_member() {
        let fused = fuzzy_max_fuse(&[rows(&[1.0, 0.0], 2)], &FusionParams::default()).unwrap();
        assert!((fused.data()[0] - 20.8001).abs() < 1e-12);
        assert!((fused.data()[1] - 20.0001).abs() < 1e-12);
    }

    #[test]
    fn two_member_hand_example() {
        let p = [rows(&[0.9, 0.1], 2), rows(&[0.3, 0.7], 2)];
        let max = elementwise_max(&p).unwrap();
        assert_eq!(max.data(), &[0.9, 0.7]);
        let fused = fuzzy_max_fuse(&p, &FusionParams::default()).unwrap();
        assert!((fused.data()[0] - 20.7201).abs() < 1e-12);
        assert!((fused.data()[1] - 20.5601).abs() < 1e-12);
        assert_eq!(argmax_rows(&fused).unwrap(), vec![0]);
    }

    #[test]
    fn identity_parameters_give_plain_max() {
        let params = FusionParams { alpha: 1.0, epsilon: 0.0, bias: 0.0 };
        let p = [rows(&[0.2, 0.8, 0.6, 0.4], 2), rows(&[0.5, 0.5, 0.1, 0.9], 2)];
        assert_eq!(fuzzy_max_fuse(&p, &params).unwrap(), elementwise_max(&p).unwrap());
    }

    #[test]
    fn unanimous_members() {
        let p = vec![rows(&[0.0, 1.0], 2); 3];
        let fused = fuzzy_max_fuse(&p, &FusionParams::default()).unwrap();
        assert_eq!(argmax_rows(&fused).unwrap(), vec![1]);
    }

    #[test]
    fn empty_and_mismatched_members() {
        let none: [Tensor<f64>; 0] = [];
        assert!(matches!(fuzzy_max_fuse(&none, &FusionParams::default()), Err(Error::Config(_))));
        let p = [rows(&[0.5, 0.5], 2), rows(&[0.2, 0.3, 0.5], 3)];
        assert!(matches!(fuzzy_max_fuse(&p, &FusionParams::default()), Err(Error::Size(_))));
    }

    #[test]
    fn non_positive_alpha_rejected() {
        let params = FusionParams { alpha: 0.0, ..FusionParams::default() };
        assert!(params.validate().is_err());
    }

    #[test]
    fn close_f32_maxima_stay_ordered() {
        let a = 0.5f32;
        let b = f32::from_bits(a.to_bits() + 1);
        let p = vec![Tensor::from_vec(&[1, 2], vec![a, b]).unwrap()];
        let narrow = fuzzy_max_fuse(&p, &FusionParams::default()).unwrap();
        assert_eq!(narrow.data()[0], narrow.data()[1]);
        assert_eq!(argmax_rows(&fused_scores(&p, &FusionParams::default()).unwrap()).unwrap(), vec![1]);
    }

    #[test]
    fn ties_break_low() {
        let fused = rows(&[20.5, 20.5], 2);
        assert_eq!(argmax_rows(&fused).unwrap(), vec![0]);
    }
}
