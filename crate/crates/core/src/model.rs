//! The full network: a multi-kernel convolution stem with spatial attention,
//! a stack of conv/BN/ReLU/pool blocks and a dense softmax head.
//!
//! ```text
//! input -> [3x3 | 5x5 | 7x7 conv] -> concat -> BN -> ReLU -> attention -> pool
//!       -> (conv 3x3 -> BN -> ReLU -> pool) x len(block_filters)
//!       -> flatten -> dense -> ReLU -> dropout -> dense -> softmax
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, STEM_KERNELS};
use crate::error::{Error, Result};
use crate::mlsam::MlsamBlock;
use crate::nn::{
    prefixed, softmax_cce_grad, BatchNorm2d, Conv2d, Dense, Dropout, Layer, LayerMode, MaxPool2d, Named, Param,
    ParallelConv, Relu, Softmax,
};
use crate::seeds::SeedPlan;
use crate::tensor::{Scalar, Tensor};

/// conv 3x3 -> BN -> ReLU -> 2x2 max pool.
#[derive(Debug, Clone)]
pub struct ConvBlock<F: Scalar = f32> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    relu: Relu<F>,
    pool: MaxPool2d,
}

impl<F: Scalar> ConvBlock<F> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::same(3, cin, cout, rng)?,
            bn: BatchNorm2d::new(cout)?,
            relu: Relu::new(),
            pool: MaxPool2d::default(),
        })
    }
}

impl<F: Scalar> Layer<F> for ConvBlock<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        let y = self.relu.forward(&y, mode)?;
        Layer::<F>::forward(&mut self.pool, &y, mode)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let g = Layer::<F>::backward(&mut self.pool, grad)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn params(&self) -> Vec<Named<&Param<F>>> {
        let mut out: Vec<_> = prefixed("conv", self.conv.params()).collect();
        out.extend(prefixed("bn", self.bn.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        let mut out: Vec<_> = prefixed("conv", self.conv.params_mut()).collect();
        out.extend(prefixed("bn", self.bn.params_mut()));
        out
    }

    fn buffers(&self) -> Vec<Named<&Tensor<F>>> {
        prefixed("bn", self.bn.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        prefixed("bn", self.bn.buffers_mut()).collect()
    }

    fn state_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        let mut out: Vec<_> = prefixed("conv", self.conv.state_mut()).collect();
        out.extend(prefixed("bn", self.bn.state_mut()));
        out
    }
}

/// Provenance stored alongside the weights in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs_trained: usize,
    /// Class names in index order, when known.
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TFusionModel<F: Scalar = f32> {
    config: ModelConfig,
    pub meta: ModelMeta,
    stem: ParallelConv<F>,
    stem_bn: BatchNorm2d<F>,
    stem_relu: Relu<F>,
    attention: MlsamBlock<F>,
    stem_pool: MaxPool2d,
    blocks: Vec<ConvBlock<F>>,
    hidden: Dense<F>,
    hidden_relu: Relu<F>,
    dropout: Dropout<F>,
    output: Dense<F>,
    softmax: Softmax<F>,
    feature_shape: Option<Vec<usize>>,
}

/// Trainable and total (trainable + BN running statistics) element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub trainable: usize,
    pub buffers: usize,
}

impl<F: Scalar> TFusionModel<F> {
    /// Builds a freshly initialised network. The same `(config, seed)` always
    /// yields bitwise-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedPlan::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.init);
        let stem = ParallelConv::new(&STEM_KERNELS, config.input_c, config.branch_filters, &mut rng)?;
        let stem_channels = stem.out_channels();
        let attention = MlsamBlock::new(stem_channels, &config.mlsam_kernels, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.block_filters.len());
        let mut cin = stem_channels;
        for &cout in &config.block_filters {
            blocks.push(ConvBlock::new(cin, cout, &mut rng)?);
            cin = cout;
        }
        let hidden = Dense::new(config.flatten_len(), config.dense_units, &mut rng)?;
        let output = Dense::new(config.dense_units, config.num_classes, &mut rng)?;
        Ok(TFusionModel {
            config: config.clone(),
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
            stem,
            stem_bn: BatchNorm2d::new(stem_channels)?,
            stem_relu: Relu::new(),
            attention,
            stem_pool: MaxPool2d::default(),
            blocks,
            hidden,
            hidden_relu: Relu::new(),
            dropout: Dropout::new(config.dropout_rate, seeds.dropout)?,
            output,
            softmax: Softmax::new(),
            feature_shape: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attention_block(&self) -> &MlsamBlock<F> {
        &self.attention
    }

    pub fn attention_block_mut(&mut self) -> &mut MlsamBlock<F> {
        &mut self.attention
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout.reseed(seed);
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = x.shape4()?;
        let c = &self.config;
        if (s.h, s.w, s.c) != (c.input_h, c.input_w, c.input_c) {
            return Err(Error::size(format!(
                "model expects [N, {}, {}, {}] input, got {:?}",
                c.input_h,
                c.input_w,
                c.input_c,
                x.shape()
            )));
        }
        Ok(())
    }

    fn forward_stem(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let y = self.stem.forward(x, mode)?;
        let y = self.stem_bn.forward(&y, mode)?;
        self.stem_relu.forward(&y, mode)
    }

    /// `[N, H, W, C]` of the feature map flattened by the most recent forward pass.
    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.feature_shape.as_deref()
    }

    /// Class logits (pre-softmax), `[N, num_classes]`.
    pub fn forward_logits(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        let y = self.forward_stem(x, mode)?;
        let y = self.attention.forward(&y, mode)?;
        let mut y = Layer::<F>::forward(&mut self.stem_pool, &y, mode)?;
        for block in &mut self.blocks {
            y = block.forward(&y, mode)?;
        }
        let n = y.shape()[0];
        self.feature_shape = Some(y.shape().to_vec());
        let flat = y.reshape(&[n, self.config.flatten_len()])?;
        let h = self.hidden.forward(&flat, mode)?;
        let h = self.hidden_relu.forward(&h, mode)?;
        let h = self.dropout.forward(&h, mode)?;
        self.output.forward(&h, mode)
    }

    /// Class probabilities `[N, num_classes]`; each row sums to one.
    pub fn forward(&mut self, x: &Tensor<F>, mode: LayerMode) -> Result<Tensor<F>> {
        let logits = self.forward_logits(x, mode)?;
        let probs = self.softmax.forward(&logits, mode)?;
        probs.debug_assert_finite("model output");
        Ok(probs)
    }

    /// Backpropagates a gradient with respect to the logits; returns the input gradient.
    pub fn backward_logits(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self
            .feature_shape
            .clone()
            .ok_or_else(|| Error::State("model: backward called before forward".into()))?;
        let g = self.output.backward(grad)?;
        let g = self.dropout.backward(&g)?;
        let g = self.hidden_relu.backward(&g)?;
        let g = self.hidden.backward(&g)?;
        let mut g = g.reshape(&shape)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        let g = Layer::<F>::backward(&mut self.stem_pool, &g)?;
        let g = self.attention.backward(&g)?;
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)
    }

    /// Backward pass of mean cross-entropy against `onehot`, using the
    /// probabilities of the last forward call. Fills every parameter gradient.
    pub fn backward_loss(&mut self, probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<Tensor<F>> {
        let grad = softmax_cce_grad(probs, onehot)?;
        self.backward_logits(&grad)
    }

    /// Runs the stem in inference mode and returns the `[N, H, W, 1]` attention map.
    pub fn attention_map(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = self.forward_stem(x, LayerMode::Infer)?;
        let (_, attention) = self.attention.forward_with_attention(&y, LayerMode::Infer)?;
        Ok(attention)
    }

    fn layers(&self) -> Vec<(String, &dyn Layer<F>)> {
        let mut out: Vec<(String, &dyn Layer<F>)> = vec![
            ("stem".into(), &self.stem),
            ("stem_bn".into(), &self.stem_bn),
            ("attention".into(), &self.attention),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}", i + 2), b));
        }
        out.push(("hidden".into(), &self.hidden));
        out.push(("output".into(), &self.output));
        out
    }

    fn layers_mut(&mut self) -> Vec<(String, &mut dyn Layer<F>)> {
        let mut out: Vec<(String, &mut dyn Layer<F>)> = vec![
            ("stem".into(), &mut self.stem),
            ("stem_bn".into(), &mut self.stem_bn),
            ("attention".into(), &mut self.attention),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{}", i + 2), b));
        }
        out.push(("hidden".into(), &mut self.hidden));
        out.push(("output".into(), &mut self.output));
        out
    }

    /// All trainable parameters with dotted names, in a fixed order.
    pub fn params(&self) -> Vec<Named<&Param<F>>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| prefixed(&name, l.params()).collect::<Vec<_>>())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<Named<&mut Param<F>>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, l)| prefixed(&name, l.params_mut()).collect::<Vec<_>>())
            .collect()
    }

    pub fn buffers(&self) -> Vec<Named<&Tensor<F>>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| prefixed(&name, l.buffers()).collect::<Vec<_>>())
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, l)| prefixed(&name, l.buffers_mut()).collect::<Vec<_>>())
            .collect()
    }

    /// Every tensor a checkpoint must hold: parameters then buffers.
    pub fn state(&self) -> Vec<Named<&Tensor<F>>> {
        let mut out: Vec<_> = self.params().into_iter().map(|(n, p)| (n, &p.value)).collect();
        out.extend(self.buffers());
        out
    }

    pub fn state_mut(&mut self) -> Vec<Named<&mut Tensor<F>>> {
        let all: Vec<_> = self
            .layers_mut()
            .into_iter()
            .flat_map(|(name, l)| prefixed(&name, l.state_mut()).collect::<Vec<_>>())
            .collect();
        // same order as `state`: every parameter, then every buffer
        let (mut params, buffers): (Vec<_>, Vec<_>) = all
            .into_iter()
            .partition(|(n, _)| !(n.ends_with(".running_mean") || n.ends_with(".running_var")));
        params.extend(buffers);
        params
    }

    /// Per-layer breakdown of parameter counts.
    pub fn layer_counts(&self) -> Vec<LayerCount> {
        let mut out: Vec<LayerCount> = Vec::new();
        let mut push = |name: String, trainable: usize, buffers: usize| {
            out.push(LayerCount {
                name,
                trainable,
                buffers,
            })
        };
        for (i, conv) in self.stem.branches().iter().enumerate() {
            push(format!("stem.k{}", STEM_KERNELS[i]), conv.param_count(), 0);
        }
        push("stem_bn".into(), self.stem_bn.param_count(), 2 * self.stem_bn.channels());
        push("attention".into(), self.attention.param_count(), 0);
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{}.conv", i + 2), b.conv.param_count(), 0);
            push(format!("block{}.bn", i + 2), b.bn.param_count(), 2 * b.bn.channels());
        }
        push("hidden".into(), self.hidden.param_count(), 0);
        push("output".into(), self.output.param_count(), 0);
        out
    }

    pub fn count_parameters(&self) -> ParamCount {
        let layers = self.layer_counts();
        let trainable: usize = layers.iter().map(|l| l.trainable).sum();
        let buffers: usize = layers.iter().map(|l| l.buffers).sum();
        ParamCount {
            trainable,
            total: trainable + buffers,
        }
    }

    /// Shapes of every feature map on the way to the dense head, `(label, [H, W, C])`.
    pub fn shape_trace(&self) -> Vec<(String, [usize; 3])> {
        let c = &self.config;
        let stem_c = self.stem.out_channels();
        let (mut h, mut w) = (c.input_h, c.input_w);
        let mut out = vec![
            ("input".to_string(), [h, w, c.input_c]),
            ("stem".to_string(), [h, w, stem_c]),
        ];
        h /= 2;
        w /= 2;
        out.push(("stem_pool".into(), [h, w, stem_c]));
        for (i, &f) in c.block_filters.iter().enumerate() {
            h /= 2;
            w /= 2;
            out.push((format!("block{}", i + 2), [h, w, f]));
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> Result<TFusionModel<G>> {
        let mut out = TFusionModel::<G>::build(&self.config, self.meta.seed)?;
        out.meta = self.meta.clone();
        for ((_, dst), (_, src)) in out.state_mut().into_iter().zip(self.state()) {
            *dst = src.cast();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_h: 8,
            input_w: 8,
            input_c: 3,
            branch_filters: 2,
            block_filters: vec![3, 4],
            dense_units: 5,
            num_classes: 2,
            dropout_rate: 0.5,
            mlsam_kernels: vec![3, 5, 7],
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TFusionModel::<f32>::build(&tiny(), 7).unwrap();
        let b = TFusionModel::<f32>::build(&tiny(), 7).unwrap();
        let c = TFusionModel::<f32>::build(&tiny(), 8).unwrap();
        let vals = |m: &TFusionModel<f32>| m.state().into_iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn biases_zero_and_bn_identity_at_init() {
        let m = TFusionModel::<f32>::build(&tiny(), 1).unwrap();
        for (name, p) in m.params() {
            if name.ends_with("bias") || name.ends_with("beta") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with("gamma") {
                assert!(p.value.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn state_names_are_unique_and_ordered() {
        let m = TFusionModel::<f32>::build(&tiny(), 1).unwrap();
        let names: Vec<String> = m.state().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut m2 = m.clone();
        let names_mut: Vec<String> = m2.state_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"attention.fuse.weight".to_string()));
        assert!(names.contains(&"block3.bn.running_var".to_string()));
    }

    #[test]
    fn forward_is_simplex_and_infer_deterministic() {
        let mut m = TFusionModel::<f32>::build(&tiny(), 3).unwrap();
        let x = Tensor::full(&[2, 8, 8, 3], 0.3).unwrap();
        let p = m.forward(&x, LayerMode::Train).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        let a = m.forward(&x, LayerMode::Infer).unwrap();
        let b = m.forward(&x, LayerMode::Infer).unwrap();
        assert_eq!(a, b);
        for row in a.data().chunks(2) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_shape() {
        let mut m = TFusionModel::<f32>::build(&tiny(), 3).unwrap();
        let x = Tensor::full(&[1, 16, 16, 3], 0.3).unwrap();
        assert!(matches!(m.forward(&x, LayerMode::Infer), Err(Error::Size(_))));
    }

    #[test]
    fn count_matches_sum_of_parameter_tensors() {
        let m = TFusionModel::<f32>::build(&tiny(), 3).unwrap();
        let counted = m.count_parameters();
        let direct: usize = m.params().iter().map(|(_, p)| p.len()).sum();
        let buffers: usize = m.buffers().iter().map(|(_, b)| b.len()).sum();
        assert_eq!(counted.trainable, direct);
        assert_eq!(counted.total, direct + buffers);
    }

    #[test]
    fn cast_round_trip_is_exact() {
        let m = TFusionModel::<f32>::build(&tiny(), 3).unwrap();
        let back = m.cast::<f64>().unwrap().cast::<f32>().unwrap();
        for ((_, a), (_, b)) in m.state().into_iter().zip(back.state()) {
            assert_eq!(a, b);
        }
    }
}
