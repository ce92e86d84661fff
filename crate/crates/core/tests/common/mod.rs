//! Helpers shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfusion::data::ImageSet;
use tfusion::image::normalize;
use tfusion::model::TFusionModel;
use tfusion::nn::{
    cce_loss, softmax_cce_grad, BatchNorm2d, Conv2d, Dense, Layer, LayerMode, MaxPool2d, Relu, Sigmoid, Softmax,
};
use tfusion::synthetic::render;
use tfusion::{MlsamBlock, ModelConfig, Tensor};

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// At most this many entries of each tensor are probed per case.
pub const PROBES_PER_TENSOR: usize = 24;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero (ReLU kink).
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values on a 0.01 grid in random order, so no max-pool window has
/// a near tie.
pub fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let len: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - len as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).unwrap()
}

fn probe_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= PROBES_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..PROBES_PER_TENSOR).map(|_| rng.random_range(0..len)).collect()
    }
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks input and parameter gradients of `J = sum(r * layer(x))`; returns
/// the largest relative error seen.
pub fn check_layer<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, mode: LayerMode, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let y = layer.forward(x, mode).unwrap();
    let r = uniform(y.shape(), &mut rng);
    let dx = layer.backward(&r).unwrap();
    let grads: Vec<Tensor<f64>> = layer.params().into_iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in probe_indices(x.len(), &mut rng) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + H;
        let plus = weighted_sum(&layer.forward(&xp, mode).unwrap(), &r);
        xp.data_mut()[i] = orig - H;
        let minus = weighted_sum(&layer.forward(&xp, mode).unwrap(), &r);
        xp.data_mut()[i] = orig;
        worst = worst.max(rel_err(dx.data()[i], (plus - minus) / (2.0 * H)));
    }
    for (k, grad) in grads.iter().enumerate() {
        for i in probe_indices(grad.len(), &mut rng) {
            let nudge = |layer: &mut L, delta: f64| {
                let mut params = layer.params_mut();
                let v = &mut params[k].1.value.data_mut()[i];
                *v += delta;
            };
            nudge(layer, H);
            let plus = weighted_sum(&layer.forward(x, mode).unwrap(), &r);
            nudge(layer, -2.0 * H);
            let minus = weighted_sum(&layer.forward(x, mode).unwrap(), &r);
            nudge(layer, H);
            worst = worst.max(rel_err(grad.data()[i], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}

/// Softmax followed by cross-entropy, checked against the combined gradient.
pub fn check_softmax_cce(n: usize, k: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let z = uniform(&[n, k], &mut rng).map(|v| 3.0 * v);
    let mut onehot = Tensor::<f64>::zeros(&[n, k]).unwrap();
    for row in 0..n {
        let c = rng.random_range(0..k);
        onehot.data_mut()[row * k + c] = 1.0;
    }
    let mut sm = Softmax::new();
    let loss = |sm: &mut Softmax<f64>, z: &Tensor<f64>| cce_loss(&sm.forward(z, LayerMode::Train).unwrap(), &onehot).unwrap();
    let p = sm.forward(&z, LayerMode::Train).unwrap();
    let analytic = softmax_cce_grad(&p, &onehot).unwrap();
    let mut worst = 0.0f64;
    let mut zp = z.clone();
    for i in 0..z.len() {
        let orig = zp.data()[i];
        zp.data_mut()[i] = orig + H;
        let plus = loss(&mut sm, &zp);
        zp.data_mut()[i] = orig - H;
        let minus = loss(&mut sm, &zp);
        zp.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * H)));
    }
    worst
}

pub struct CaseResult {
    pub layer: &'static str,
    pub max_rel: f64,
}

/// Randomised small-shape cases over every layer type.
pub fn layer_cases(cases_per_layer: u64) -> Vec<CaseResult> {
    let mut out = Vec::new();
    let mut push = |layer: &'static str, max_rel: f64| out.push(CaseResult { layer, max_rel });
    for case in 0..cases_per_layer {
        let seed = 1000 + case;
        let mut r = rng(seed);
        let n = r.random_range(1..=3);
        let h = r.random_range(2..=6);
        let w = r.random_range(2..=6);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=10);

        let k = [1, 3, 5][r.random_range(0..3)];
        let mut conv = Conv2d::<f64>::same(k, cin, cout, &mut r).unwrap();
        let x = uniform(&[n, h, w, cin], &mut r);
        push("conv", check_layer(&mut conv, &x, LayerMode::Train, seed));

        // strided, asymmetric geometry goes through the im2col path
        let mut strided = Conv2d::<f64>::new(3, 2, cin, cout, 2, 1, &mut r).unwrap();
        let xs = uniform(&[n, 2 * h + 1, 2 * w, cin], &mut r);
        push("conv", check_layer(&mut strided, &xs, LayerMode::Train, seed + 1));

        let mut bn = BatchNorm2d::<f64>::new(cin).unwrap();
        let xb = uniform(&[n.max(2), h, w, cin], &mut r);
        push("batchnorm", check_layer(&mut bn, &xb, LayerMode::Train, seed));
        push("batchnorm", check_layer(&mut bn, &xb, LayerMode::Infer, seed + 2));

        let mut pool = MaxPool2d::default();
        let xp = separated(&[n, 2 * h, 2 * w + 1, cin], &mut r);
        push("maxpool", check_layer(&mut pool, &xp, LayerMode::Train, seed));

        let din = r.random_range(1..=12);
        let mut dense = Dense::<f64>::new(din, cout, &mut r).unwrap();
        push("dense", check_layer(&mut dense, &uniform(&[n, din], &mut r), LayerMode::Train, seed));

        let mut relu = Relu::new();
        push("relu", check_layer(&mut relu, &away_from_zero(&[n, h, w, cin], 1e-3, &mut r), LayerMode::Train, seed));

        let mut sig = Sigmoid::new();
        let xs = uniform(&[n, h, w, cin], &mut r).map(|v| 6.0 * v);
        push("sigmoid", check_layer(&mut sig, &xs, LayerMode::Train, seed));

        let classes = r.random_range(2..=5);
        let mut sm = Softmax::new();
        push("softmax", check_layer(&mut sm, &uniform(&[n, classes], &mut r), LayerMode::Train, seed));
        push("softmax+cce", check_softmax_cce(n, classes, seed));

        let mut att = MlsamBlock::<f64>::new(cin, &[3, 5, 7], &mut r).unwrap();
        push("mlsam", check_layer(&mut att, &uniform(&[n, h, w, cin], &mut r), LayerMode::Train, seed));
    }
    out
}

/// One-sided slopes that disagree by more than this (relative) mark a probe
/// whose step straddles a ReLU or max-pool switch; smooth curvature at this
/// step size spreads them by about 1e-5.
pub const KINK_SPREAD: f64 = 1e-3;
/// Largest share of end-to-end probes that may be set aside as kinks.
pub const MAX_KINK_SHARE: f64 = 0.02;

#[derive(Debug, Clone, Copy, Default)]
pub struct EndToEnd {
    pub max_rel: f64,
    pub probes: usize,
    pub kinks: usize,
}

/// Compares `analytic` with the central difference of `f` at step `H`.
/// Probes straddling a kink, recognised by the analytic value agreeing with
/// one one-sided slope while the two slopes disagree, are reported as `None`.
fn probe(analytic: f64, mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let (plus, zero, minus) = (f(H), f(0.0), f(-H));
    let central = rel_err(analytic, (plus - minus) / (2.0 * H));
    let forward = (plus - zero) / H;
    let backward = (zero - minus) / H;
    let straddles = rel_err(forward, backward) > KINK_SPREAD;
    let one_sided = rel_err(analytic, forward).min(rel_err(analytic, backward));
    if straddles && one_sided < 1e-4 {
        None
    } else {
        Some(central)
    }
}

/// End-to-end check of the desk architecture: cross-entropy gradients of
/// every parameter tensor (sampled entries) and of the input.
pub fn desk_end_to_end(seed: u64) -> EndToEnd {
    let cfg = ModelConfig::desk();
    let mut model = TFusionModel::<f64>::build(&cfg, seed).unwrap();
    let mut r = rng(seed);
    let n = 2;
    let x = uniform(&[n, cfg.input_h, cfg.input_w, cfg.input_c], &mut r).map(|v| 0.5 + 0.5 * v);
    let mut onehot = Tensor::<f64>::zeros(&[n, cfg.num_classes]).unwrap();
    for row in 0..n {
        onehot.data_mut()[row * cfg.num_classes + row % cfg.num_classes] = 1.0;
    }
    // a fixed dropout mask for every evaluation
    let mask_seed = 77;
    let loss = |model: &mut TFusionModel<f64>, x: &Tensor<f64>| {
        model.reseed_dropout(mask_seed);
        cce_loss(&model.forward(x, LayerMode::Train).unwrap(), &onehot).unwrap()
    };
    model.reseed_dropout(mask_seed);
    let probs = model.forward(&x, LayerMode::Train).unwrap();
    let dx = model.backward_loss(&probs, &onehot).unwrap();
    let grads: Vec<Tensor<f64>> = model.params().into_iter().map(|(_, p)| p.grad.clone()).collect();

    let mut out = EndToEnd::default();
    let mut record = |result: Option<f64>| {
        out.probes += 1;
        match result {
            Some(e) => out.max_rel = out.max_rel.max(e),
            None => out.kinks += 1,
        }
    };
    for (k, grad) in grads.iter().enumerate() {
        for i in probe_indices(grad.len(), &mut r).into_iter().take(8) {
            record(probe(grad.data()[i], |d| {
                model.params_mut()[k].1.value.data_mut()[i] += d;
                let l = loss(&mut model, &x);
                model.params_mut()[k].1.value.data_mut()[i] -= d;
                l
            }));
        }
    }
    for i in probe_indices(x.len(), &mut r).into_iter().take(8) {
        record(probe(dx.data()[i], |d| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            loss(&mut model, &xp)
        }));
    }
    out
}

/// Per-layer `(name, trainable, buffers)` from closed-form counting, written
/// independently of the model code.
pub fn param_oracle(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let stem_c = 3 * cfg.branch_filters;
    let mut out = Vec::new();
    for k in [3, 5, 7] {
        out.push((format!("stem.k{k}"), conv(k, cfg.input_c, cfg.branch_filters), 0));
    }
    out.push(("stem_bn".into(), 2 * stem_c, 2 * stem_c));
    let branches: usize = cfg.mlsam_kernels.iter().map(|&k| conv(k, stem_c, 4)).sum();
    out.push(("attention".into(), branches + conv(3, 4 * cfg.mlsam_kernels.len(), 1), 0));
    let mut cin = stem_c;
    for (i, &f) in cfg.block_filters.iter().enumerate() {
        out.push((format!("block{}.conv", i + 2), conv(3, cin, f), 0));
        out.push((format!("block{}.bn", i + 2), 2 * f, 2 * f));
        cin = f;
    }
    let side = |v: usize| v >> (1 + cfg.block_filters.len());
    let flat = side(cfg.input_h) * side(cfg.input_w) * cin;
    out.push(("hidden".into(), flat * cfg.dense_units + cfg.dense_units, 0));
    out.push(("output".into(), cfg.dense_units * cfg.num_classes + cfg.num_classes, 0));
    out
}

/// In-memory synthetic blobs and rings, `per_class` of each, preprocessed
/// like files on disk would be.
pub fn synthetic_set(per_class: usize, size: usize, seed: u64) -> ImageSet<f32> {
    let mut r = rng(seed);
    let mut images = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let class = i % 2;
        let raw: Vec<f32> = render(class, size, 20.0, &mut r).into_iter().map(f32::from).collect();
        images.push(normalize(&Tensor::from_vec(&[size, size, 3], raw).unwrap()));
        labels.push(class);
    }
    ImageSet { images, labels, num_classes: 2 }
}

pub fn tfusion_bin() -> &'static str {
    env!("CARGO_BIN_EXE_tfusion")
}
