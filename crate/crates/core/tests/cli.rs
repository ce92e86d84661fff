mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tfusion_bin;
use tempfile::TempDir;
use tfusion::checkpoint;
use tfusion::model::TFusionModel;
use tfusion::synthetic::{write_dataset, SyntheticSpec, CLASS_NAMES};
use tfusion::ModelConfig;

fn run(args: &[&str]) -> Output {
    Command::new(tfusion_bin()).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset plus an untrained desk checkpoint that knows its class names.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec {
            per_class: 6,
            seed: 9,
            ..SyntheticSpec::default()
        };
        write_dataset(&dir.path().join("data"), &spec).unwrap();
        let mut model = TFusionModel::<f32>::build(&ModelConfig::desk(), 3).unwrap();
        model.meta.class_names = CLASS_NAMES.iter().map(|c| c.to_string()).collect();
        checkpoint::save(&model, &dir.path().join("model.tfn")).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn image(&self) -> PathBuf {
        self.path("data/blob/blob_0000.ppm")
    }
}

#[test]
fn help_lists_every_train_flag() {
    let o = run(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in [
        "--data", "--preset", "--config", "--set", "--seed", "--seeds", "--jobs", "--epochs", "--out", "--history",
        "--metrics", "--quiet",
    ] {
        assert!(text.contains(flag), "{flag} missing from:\n{text}");
    }
    let top = stdout(&run(&["--help"]));
    for cmd in ["train", "eval", "ensemble-eval", "predict", "export-attention", "count-params", "synth"] {
        assert!(top.contains(cmd), "{cmd} missing");
    }
}

#[test]
fn unknown_flag_exits_2() {
    assert_eq!(run(&["count-params", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2_and_is_named() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    std::fs::write(&cfg, "# typo below\nlearning_rte = 0.1\n").unwrap();
    let o = run(&["train", "--data", s(&f.path("data")), "--config", s(&cfg), "--out", s(&f.path("m.tfn"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));
    let o = run(&["count-params", "--set", "dropout_rate=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_data_dir_exits_3() {
    let f = Fixture::new();
    std::fs::create_dir(f.path("empty")).unwrap();
    let o = run(&["train", "--preset", "desk", "--data", s(&f.path("empty")), "--out", s(&f.path("m.tfn"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_5_and_missing_one_exits_4() {
    let f = Fixture::new();
    let mut bytes = std::fs::read(f.path("model.tfn")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(f.path("half.tfn"), &bytes).unwrap();
    let o = run(&["eval", "--model", s(&f.path("half.tfn")), "--data", s(&f.path("data"))]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let o = run(&["eval", "--model", s(&f.path("absent.tfn")), "--data", s(&f.path("data"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn undecodable_image_exits_3() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.ppm"), b"P6\n4 4\n255\n\x00\x01").unwrap();
    let o = run(&["predict", "--model", s(&f.path("model.tfn")), "--image", s(&f.path("bad.ppm"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn count_params_matches_the_oracle_totals() {
    let o = run(&["count-params"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("trainable=3825403"), "{}", stdout(&o));
    let o = run(&["count-params", "--set", "dense_units=288"]);
    assert!(stdout(&o).contains("trainable=4226907"), "{}", stdout(&o));
}

#[test]
fn predict_prints_class_and_probability() {
    let f = Fixture::new();
    let o = run(&["predict", "--model", s(&f.path("model.tfn")), "--image", s(&f.image())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    let rest = line.trim().strip_prefix("class=").expect("class= prefix");
    let (name, prob) = rest.split_once(" prob=").expect("prob= field");
    assert!(CLASS_NAMES.contains(&name), "{line}");
    let p: f64 = prob.parse().unwrap();
    assert!((0.5..=1.0).contains(&p) && prob.len() == 6, "{line}");
}

#[test]
fn zero_fuse_attention_exports_uniform_gray() {
    let f = Fixture::new();
    let mut model = checkpoint::load(&f.path("model.tfn")).unwrap();
    let fuse = model.attention_block_mut().fuse_mut();
    fuse.weight_mut().value.data_mut().fill(0.0);
    fuse.bias_mut().value.data_mut().fill(0.0);
    checkpoint::save(&model, &f.path("zero.tfn")).unwrap();
    let out = f.path("att.pgm");
    let o = run(&["export-attention", "--model", s(&f.path("zero.tfn")), "--image", s(&f.image()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    assert_eq!(bytes.len(), header.len() + 32 * 32);
}

#[test]
fn single_member_ensemble_matches_eval() {
    let f = Fixture::new();
    let (m, d) = (f.path("model.tfn"), f.path("data"));
    let (em, ee) = (f.path("eval.json"), f.path("ens.json"));
    let o = run(&["eval", "--model", s(&m), "--data", s(&d), "--metrics", s(&em)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let acc = stdout(&o);
    let o = run(&["ensemble-eval", "--models", s(&m), "--data", s(&d), "--metrics", s(&ee)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last().unwrap(), acc.trim());
    assert_eq!(std::fs::read(em).unwrap(), std::fs::read(ee).unwrap());
}

#[test]
fn several_seeds_need_a_seed_placeholder() {
    let f = Fixture::new();
    let o = run(&[
        "train", "--preset", "desk", "--data", s(&f.path("data")), "--seeds", "1,2", "--out", s(&f.path("m.tfn")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("{seed}"));
}

#[test]
fn class_count_mismatch_exits_2() {
    let f = Fixture::new();
    let o = run(&[
        "train", "--preset", "desk", "--set", "num_classes=3", "--data", s(&f.path("data")), "--out",
        s(&f.path("m.tfn")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn short_training_run_writes_every_artifact() {
    let f = Fixture::new();
    let o = run(&[
        "train",
        "--preset",
        "desk",
        "--data",
        s(&f.path("data")),
        "--epochs",
        "1",
        "--seed",
        "4",
        "--out",
        s(&f.path("m.tfn")),
        "--history",
        s(&f.path("h.csv")),
        "--metrics",
        s(&f.path("m.json")),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("val_accuracy="));
    assert!(stderr(&o).is_empty());
    let csv = std::fs::read_to_string(f.path("h.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert_eq!(csv.lines().count(), 2);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(f.path("m.json")).unwrap()).unwrap();
    for key in ["accuracy", "top1_error", "per_class", "macro", "confusion"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let model = checkpoint::load(&f.path("m.tfn")).unwrap();
    assert_eq!((model.meta.seed, model.meta.epochs_trained), (4, 1));
    let o = run(&["eval", "--model", s(&f.path("m.tfn")), "--data", s(&f.path("data")), "--split", "test"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), stdout(&run(&[
        "eval", "--model", s(&f.path("m.tfn")), "--data", s(&f.path("data")), "--split", "test",
    ])));
}
