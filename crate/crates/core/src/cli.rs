//! Command-line driver. Exit codes: 0 ok, 2 config, 3 data, 4 I/O, 5 checkpoint.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::{Dataset, ImageSet};
use crate::ensemble::{EnsembleModel, FusionParams};
use crate::error::{Error, Result};
use crate::image;
use crate::metrics::{classification_metrics, ConfusionMatrix, MetricsReport};
use crate::mlsam::export_attention;
use crate::model::TFusionModel;
use crate::nn::LayerMode;
use crate::parallel;
use crate::seeds::SeedPlan;
use crate::synthetic::{self, SyntheticSpec};
use crate::tensor::{argmax_rows, Tensor};
use crate::training::{self, stratified_split};

#[derive(Debug, Parser)]
#[command(name = "tfusion", version, about = "Multi-kernel attention CNN: training, evaluation and fuzzy max ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model (or one per seed) on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Evaluate the fuzzy max fusion of several checkpoints.
    EnsembleEval(EnsembleArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Write the attention map of one image as a PGM.
    ExportAttention(AttentionArgs),
    /// Print per-layer and total parameter counts for a configuration.
    CountParams(CountArgs),
    /// Generate the synthetic two-class dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 224x224 reference architecture.
    Default,
    /// 32x32 CPU-scale architecture.
    Desk,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Base architecture before the config file and overrides are applied.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set dense_units=288`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if self.preset == Preset::Desk {
            cfg.model = ModelConfig::desk();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.overrides {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Every sample in the directory.
    All,
    /// The training part of the seeded stratified split.
    Train,
    /// The held-out part of the seeded stratified split.
    Test,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Which samples to evaluate. `train`/`test` reproduce the split made at
    /// training time from the checkpoint's seed.
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Seed for initialisation, shuffling, dropout and the split.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train one model per seed; paths must then contain `{seed}`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    /// Models trained concurrently when several seeds are given.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV history.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Held-out metrics report (JSON).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub bias: Option<f64>,
    /// Config file supplying `alpha`, `epsilon` and `bias` (flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 20.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::EnsembleEval(a) => cmd_ensemble_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportAttention(a) => cmd_export_attention(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn with_seed(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(root: &Path, config: &ModelConfig) -> Result<(Dataset, ImageSet)> {
    if config.input_c != 3 {
        return Err(Error::config(format!(
            "images are decoded to 3 channels but input_c = {}",
            config.input_c
        )));
    }
    let ds = Dataset::load_dir(root)?;
    if ds.num_classes() != config.num_classes {
        return Err(Error::config(format!(
            "{} has {} classes but num_classes = {}",
            root.display(),
            ds.num_classes(),
            config.num_classes
        )));
    }
    let set = ds.preprocess(config.input_h, config.input_w)?;
    Ok((ds, set))
}

fn check_class_names(model: &TFusionModel, ds: &Dataset) -> Result<()> {
    let names = &model.meta.class_names;
    if !names.is_empty() && names != &ds.class_names {
        return Err(Error::Data(format!(
            "model classes {names:?} differ from dataset classes {:?}",
            ds.class_names
        )));
    }
    Ok(())
}

fn report(labels: &[usize], predictions: &[usize], k: usize) -> Result<MetricsReport> {
    classification_metrics(&ConfusionMatrix::new(labels, predictions, k)?)
}

fn train_one(args: &TrainArgs, cfg: &RunConfig, seed: u64, ds: &Dataset, set: &ImageSet, multi: bool) -> Result<f64> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let (train_idx, test_idx) = stratified_split(&set.labels, train_cfg.test_fraction, SeedPlan::new(seed).split)?;
    let mut model = TFusionModel::<f32>::build(&cfg.model, seed)?;
    model.meta.class_names = ds.class_names.clone();
    let tag = if multi { format!("[seed {seed}] ") } else { String::new() };
    let history = training::train(&mut model, set, &train_idx, &test_idx, &train_cfg, |r| {
        if !args.quiet {
            eprintln!(
                "{tag}epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
    })?;
    checkpoint::save(&model, &with_seed(&args.out, seed))?;
    if let Some(path) = &args.history {
        history.write_csv(&with_seed(path, seed))?;
    }
    let eval = training::evaluate(&mut model, set, &test_idx)?;
    if let Some(path) = &args.metrics {
        let r = report(&eval.labels, &eval.predictions, set.num_classes)?;
        write_text(&with_seed(path, seed), &r.to_json())?;
    }
    Ok(eval.accuracy)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.max_epochs = epochs;
    }
    cfg.validate()?;
    let seeds = if args.seeds.is_empty() { vec![cfg.train.seed] } else { args.seeds.clone() };
    let multi = seeds.len() > 1;
    if multi {
        let outputs = [Some(&args.out), args.history.as_ref(), args.metrics.as_ref()];
        if let Some(p) = outputs.into_iter().flatten().find(|p| !p.to_string_lossy().contains("{seed}")) {
            return Err(Error::config(format!(
                "with several seeds, output path {} must contain {{seed}}",
                p.display()
            )));
        }
    }
    let (ds, set) = load_data(&args.data, &cfg.model)?;
    let results = parallel::map_on_pool(seeds.clone(), args.jobs, |seed| train_one(args, &cfg, seed, &ds, &set, multi));
    for (seed, acc) in seeds.iter().zip(results) {
        let acc = acc?;
        if multi {
            println!("seed={seed} val_accuracy={acc:.4}");
        } else {
            println!("val_accuracy={acc:.4}");
        }
    }
    Ok(())
}

/// Indices selected by `--split`, using the split seed stored in the model.
fn split_indices(split: &SplitArgs, labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    match split.split {
        Split::All => Ok((0..labels.len()).collect()),
        Split::Train | Split::Test => {
            let (train, test) = stratified_split(labels, split.test_fraction, SeedPlan::new(seed).split)?;
            Ok(if split.split == Split::Train { train } else { test })
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut model = checkpoint::load(&args.model)?;
    let (ds, set) = load_data(&args.data, model.config())?;
    check_class_names(&model, &ds)?;
    let indices = split_indices(&args.split, &set.labels, model.meta.seed)?;
    let eval = training::evaluate(&mut model, &set, &indices)?;
    let r = report(&eval.labels, &eval.predictions, set.num_classes)?;
    if let Some(path) = &args.metrics {
        write_text(path, &r.to_json())?;
    }
    println!("accuracy={:.4}", r.accuracy);
    Ok(())
}

fn cmd_ensemble_eval(args: &EnsembleArgs) -> Result<()> {
    let mut fusion = FusionParams::default();
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path)?;
        fusion = cfg.fusion;
    }
    if let Some(v) = args.alpha {
        fusion.alpha = v;
    }
    if let Some(v) = args.epsilon {
        fusion.epsilon = v;
    }
    if let Some(v) = args.bias {
        fusion.bias = v;
    }
    let members = args
        .models
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let split_seed = members[0].meta.seed;
    let mut ensemble = EnsembleModel::new(members, fusion)?;
    let (ds, set) = load_data(&args.data, ensemble.members()[0].config())?;
    for m in ensemble.members() {
        check_class_names(m, &ds)?;
    }
    let indices = split_indices(&args.split, &set.labels, split_seed)?;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut member_correct = vec![0usize; ensemble.members().len()];
    for chunk in indices.chunks(64) {
        let batch = set.batch(chunk)?;
        let probs = ensemble.member_probs(&batch.images)?;
        for (count, p) in member_correct.iter_mut().zip(&probs) {
            *count += argmax_rows(p)?.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
        }
        let fused = crate::ensemble::fused_scores(&probs, &ensemble.params)?;
        predictions.extend(argmax_rows(&fused)?);
    }
    let labels: Vec<usize> = indices.iter().map(|&i| set.labels[i]).collect();
    let r = report(&labels, &predictions, set.num_classes)?;
    if let Some(path) = &args.metrics {
        write_text(path, &r.to_json())?;
    }
    for (path, correct) in args.models.iter().zip(member_correct) {
        println!("member={} accuracy={:.4}", path.display(), correct as f64 / indices.len() as f64);
    }
    println!("accuracy={:.4}", r.accuracy);
    Ok(())
}

fn load_single(model: &TFusionModel, path: &Path) -> Result<Tensor> {
    let c = model.config();
    let img: Tensor = image::preprocess(path, c.input_h, c.input_w)?;
    img.reshape(&[1, c.input_h, c.input_w, 3])
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let mut model = checkpoint::load(&args.model)?;
    let x = load_single(&model, &args.image)?;
    let probs = model.forward(&x, LayerMode::Infer)?;
    let class = argmax_rows(&probs)?[0];
    let name = model
        .meta
        .class_names
        .get(class)
        .cloned()
        .unwrap_or_else(|| class.to_string());
    println!("class={name} prob={:.4}", probs.data()[class]);
    Ok(())
}

fn cmd_export_attention(args: &AttentionArgs) -> Result<()> {
    let mut model = checkpoint::load(&args.model)?;
    let x = load_single(&model, &args.image)?;
    let attention = model.attention_map(&x)?;
    export_attention(&attention, &args.out)
}

/// Per-layer table followed by `trainable=<n> total=<n>`.
pub fn format_param_table(model: &TFusionModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>12} {:>10}", "layer", "trainable", "buffers");
    for l in model.layer_counts() {
        let _ = writeln!(out, "{:<16} {:>12} {:>10}", l.name, l.trainable, l.buffers);
    }
    let c = model.count_parameters();
    let _ = writeln!(out, "trainable={} total={}", c.trainable, c.total);
    out
}

fn cmd_count_params(args: &CountArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    cfg.validate()?;
    let model = TFusionModel::<f32>::build(&cfg.model, 0)?;
    print!("{}", format_param_table(&model));
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        per_class: args.per_class,
        size: args.size,
        noise: args.noise,
        seed: args.seed,
    };
    synthetic::write_dataset(&args.out, &spec)?;
    println!("wrote {} images to {}", 2 * spec.per_class, args.out.display());
    Ok(())
}
