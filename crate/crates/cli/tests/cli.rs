use std::path::Path;
use std::process::{Command, Output};

use promptlab::config::ExperimentConfig;
use promptlab::encoder::EncoderConfig;

fn promptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    cfg.encoder = EncoderConfig::tiny();
    cfg.dataset.synthetic.image_size = 16;
    cfg.dataset.synthetic.train_per_class = 4;
    cfg.dataset.synthetic.test_per_class = 5;
    cfg.train.epochs = 2;
    cfg.strategy_config.unified_width = 16;
    cfg.strategy_config.transform_heads = 2;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn off_grid_shots_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = promptlab(&["--out", dir.path().to_str().unwrap(), "train", "--shots", "3"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("{1,2,4,8,16}"), "{err}");
    assert!(err.starts_with("error kind=config"));
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(promptlab(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(promptlab(&["--precision", "f16", "train"]).status.code(), Some(2));
    assert_eq!(promptlab(&[]).status.code(), Some(2));
}

#[test]
fn bad_config_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = promptlab(&["--config", missing.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(3));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"train": {"epochs": 2, "learning_rate": 1.0}}"#).unwrap();
    let o = promptlab(&["--config", unknown.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("learning_rate"));

    let o = promptlab(&["--out", dir.path().to_str().unwrap(), "train", "--strategy", "prefix"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_reproduces_the_stored_zero_shot_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = promptlab(&["--config", &cfg, "--out", out, "train", "--strategy", "zero_shot", "--shots", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(out).join("run.json")).unwrap()).unwrap();
    let stored = record["test_accuracy"].as_f64().unwrap();

    let o = promptlab(&["--config", &cfg, "--out", out, "eval", "--strategy", "zero_shot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: f64 = stdout(&o)
        .trim()
        .rsplit("accuracy=")
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(printed, stored);
}

#[test]
fn eval_of_trained_prompts_matches_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = promptlab(&["--config", &cfg, "--out", out_s, "train", "--strategy", "unified", "--shots", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let prompts = out.join("prompts").join("unified");
    let o = promptlab(&["--config", &cfg, "--out", out_s, "eval", "--prompts", prompts.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(&format!("accuracy={}", record["test_accuracy"].as_f64().unwrap())));

    // Non-zero-shot eval without prompts is a usage problem.
    let o = promptlab(&["--config", &cfg, "--out", out_s, "eval", "--strategy", "unified"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn resolved_config_records_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = promptlab(&[
        "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9",
        "train", "--strategy", "coop", "--shots", "1", "--epochs", "1", "--lr", "0.01",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(resolved.seed, 9);
    assert_eq!(resolved.shots, 1);
    assert_eq!(resolved.train.epochs, 1);
    assert_eq!(resolved.train.initial_lr, 0.01);
    assert_eq!(resolved.strategy.name(), "text_only");
}

#[test]
fn generated_data_and_backbone_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for sub in ["x", "y"] {
        let out = dir.path().join(sub);
        let o = promptlab(&["--config", &cfg, "--out", out.to_str().unwrap(), "gen-data", "--rho", "0.5"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = promptlab(&["--config", &cfg, "--out", out.to_str().unwrap(), "init-backbone"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["data/manifest.json", "data/train_images.pft", "backbone/header.json"] {
        let a = std::fs::read(dir.path().join("x").join(f));
        let b = std::fs::read(dir.path().join("y").join(f));
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b, "{f}"),
            (a, b) => panic!("{f}: {:?} {:?}", a.err(), b.err()),
        }
    }
}

#[test]
fn variance_and_shift_eval_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = promptlab(&["--config", &cfg, "--out", out_s, "variance"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("variance.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 + 2);

    let o = promptlab(&["--config", &cfg, "--out", out_s, "shift-eval", "--strategy", "text_only", "--shots", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("target=noise-0.5"));
    assert!(text.lines().last().unwrap().starts_with("ood_average="));
}

#[test]
fn attention_map_needs_visual_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = promptlab(&[
        "--config", &cfg, "--out", out.to_str().unwrap(),
        "attn-map", "--strategy", "text_only", "--shots", "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=contract"));
    let o = promptlab(&[
        "--config", &cfg, "--out", out.to_str().unwrap(),
        "attn-map", "--strategy", "vpt_deep", "--shots", "1", "--images", "0,3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("attention").join("image3_layer1.json").exists());
}
