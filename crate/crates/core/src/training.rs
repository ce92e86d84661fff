//! Adam, stratified splitting and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_value;
use crate::data::{batch_indices, ImageSet};
use crate::error::{Error, Result};
use crate::model::TFusionModel;
use crate::nn::{cce_loss, LayerMode, Named, Param};
use crate::seeds::SeedPlan;
use crate::tensor::{argmax_rows, Scalar, Tensor};

/// Batch size used for inference-only passes.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction {} not in (0, 1)", self.test_fraction)));
        }
        Ok(())
    }

    pub fn write_pairs(&self, out: &mut String) {
        let _ = writeln!(out, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "test_fraction = {:?}", self.test_fraction);
    }
}

/// Adam moments for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar = f32> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&Param<F>]) -> Result<Self> {
        let zeros = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState {
            m: zeros.clone(),
            v: zeros,
            ..AdamState::default()
        })
    }

    /// One bias-corrected update of every parameter from its stored gradient.
    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::size(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != self.m[i].shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::size(format!(
                    "parameter {i}: value {:?}, grad {:?}, moments {:?}",
                    p.value.shape(),
                    p.grad.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Param { value, grad } = &mut **p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m_new = b1 * m.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = F::from_f64(m_new);
                *v = F::from_f64(v_new);
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *w = F::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

fn strip_names<T>(named: Vec<Named<T>>) -> Vec<T> {
    named.into_iter().map(|(_, t)| t).collect()
}

/// Per-class seeded split; class `c` with `n_c` samples contributes exactly
/// `floor(test_fraction * n_c)` test samples. Both index lists are sorted.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {c} has {} sample; at least 2 are needed",
                members.len()
            )));
        }
        // the epsilon keeps exact products such as 0.2 * 1250 from flooring down
        let n_test = (test_fraction * members.len() as f64 + 1e-9).floor() as usize;
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps taken in total.
    pub steps: u64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Inference-mode loss, accuracy and argmax predictions over `indices`.
pub fn evaluate<F: Scalar>(model: &mut TFusionModel<F>, data: &ImageSet<F>, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?;
        let probs = model.forward(&batch.images, LayerMode::Infer)?;
        loss += cce_loss(&probs, &batch.onehot)?.as_f64() * chunk.len() as f64;
        predictions.extend(argmax_rows(&probs)?);
        labels.extend(batch.labels);
    }
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        predictions,
        labels,
    })
}

/// Inference-mode probabilities `[len, K]` for `indices`, in order.
pub fn predict_probs<F: Scalar>(model: &mut TFusionModel<F>, data: &ImageSet<F>, indices: &[usize]) -> Result<Tensor<F>> {
    let mut out = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        out.extend_from_slice(model.forward(&data.batch(chunk)?.images, LayerMode::Infer)?.data());
    }
    Tensor::from_vec(&[indices.len(), model.config().num_classes], out)
}

/// Runs one optimizer step on a batch; returns `(mean loss, correct count)`.
pub fn train_step<F: Scalar>(
    model: &mut TFusionModel<F>,
    adam: &mut AdamState<F>,
    images: &Tensor<F>,
    onehot: &Tensor<F>,
    lr: f64,
) -> Result<(f64, usize)> {
    let probs = model.forward(images, LayerMode::Train)?;
    let loss = cce_loss(&probs, onehot)?.as_f64();
    let truth = argmax_rows(onehot)?;
    let correct = argmax_rows(&probs)?.iter().zip(&truth).filter(|(p, t)| p == t).count();
    model.backward_loss(&probs, onehot)?;
    adam.step(&mut strip_names(model.params_mut()), lr)?;
    Ok((loss, correct))
}

/// Trains for `config.max_epochs` epochs over `train_idx`, validating on
/// `val_idx` after each epoch (skipped when empty, recorded as NaN).
pub fn train<F: Scalar>(
    model: &mut TFusionModel<F>,
    data: &ImageSet<F>,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut adam = AdamState::new(&strip_names(model.params()))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(SeedPlan::new(config.seed).shuffle);
    let mut history = History::default();
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in batch_indices(train_idx, config.batch_size, true, shuffle_rng.random())? {
            let batch = data.batch(&chunk)?;
            let (loss, c) = train_step(model, &mut adam, &batch.images, &batch.onehot, config.learning_rate)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        let (val_loss, val_acc) = if val_idx.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let e = evaluate(model, data, val_idx)?;
            (e.loss, e.accuracy)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&record);
        history.epochs.push(record);
        model.meta.epochs_trained += 1;
    }
    history.steps = adam.t;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![v]).unwrap());
        p.grad = Tensor::from_vec(&[1], vec![g]).unwrap();
        p
    }

    #[test]
    fn split_sizes() {
        let mut labels = vec![0; 1252];
        labels.extend(vec![1; 1230]);
        let (train, test) = stratified_split(&labels, 0.2, 7).unwrap();
        let count = |set: &[usize], c| set.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!((count(&test, 0), count(&test, 1)), (250, 246));
        assert_eq!(train.len() + test.len(), labels.len());
        let (train2, test2) = stratified_split(&labels, 0.2, 7).unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn split_is_partition() {
        let labels = [0, 1, 0, 1, 0, 1, 1, 0];
        let (train, test) = stratified_split(&labels, 0.5, 1).unwrap();
        assert_eq!(test.len(), 4);
        let mut all = [train, test].concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_class_rejected() {
        assert!(matches!(stratified_split(&[0, 0, 1], 0.5, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = scalar_param(3.0, 0.0);
        let mut adam = AdamState::new(&[&p]).unwrap();
        for _ in 0..5 {
            adam.step(&mut [&mut p], 0.1).unwrap();
        }
        assert_eq!(p.value.data(), &[3.0]);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = scalar_param(0.0, 4.0);
        let mut adam = AdamState::new(&[&p]).unwrap();
        adam.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_two_steps() {
        let mut p = scalar_param(1.0, 1.0);
        let mut adam = AdamState::new(&[&p]).unwrap();
        adam.step(&mut [&mut p], 0.001).unwrap();
        adam.step(&mut [&mut p], 0.001).unwrap();
        assert!((p.value.data()[0] - 0.998).abs() < 1e-6);
    }

    #[test]
    fn adam_shape_mismatch() {
        let p = scalar_param(1.0, 1.0);
        let mut adam = AdamState::new(&[&p]).unwrap();
        let mut q = Param::new(Tensor::<f64>::zeros(&[2]).unwrap());
        assert!(matches!(adam.step(&mut [&mut q], 0.1), Err(Error::Size(_))));
    }

    #[test]
    fn history_csv() {
        let h = History {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_loss: 1.0 / 3.0, val_acc: 1.0 }],
            steps: 2,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.500000,0.750000,0.333333,1.000000\n");
    }
}
