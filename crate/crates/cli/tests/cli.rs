use std::path::Path;
use std::process::{Command, Output};

use ovd_detector::TrainConfig;

fn ovd(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ovd")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = ovd(&["synth", "--out", "corpus", "--datasets", "2", "--volumes", "5", "--depth", "3", "--size", "64"], root);
    assert!(o.status.success());
    let corpus = root.join("corpus");
    let matrix = std::fs::read_to_string(corpus.join("matrix.csv")).unwrap();
    assert!(matrix.starts_with("dataset,liver,kidney,spleen,tumor,pancreas,aorta"));
    assert!(matrix.contains("synth_a,1,1,1,0,-1,-1"), "{matrix}");

    let o = ovd(
        &["curate", "--descriptor", "corpus/synth_a/dataset.json", "corpus/synth_b/dataset.json", "--out", "corpus/curated", "--val-fraction", "0.2", "--holdout", "aorta"],
        root,
    );
    assert!(o.status.success());
    let train = std::fs::read_to_string(corpus.join("curated/train.jsonl")).unwrap();
    assert!(!train.is_empty() && !train.contains("aorta"));
    let first: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert!(corpus.join("curated").join(first["image"].as_str().unwrap()).exists());

    let o = ovd(&["matrix", "validate", "--matrix", "corpus/matrix.csv", "--records", "corpus/curated/train.jsonl", "corpus/curated/val.jsonl"], root);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 violation(s)"));

    // a matrix that forbids an annotated class is rejected
    assert!(train.contains("\"classes\":[\""));
    let bad: String = matrix.lines().map(|l| l.replace(",1", ",-1") + "\n").collect();
    std::fs::write(root.join("bad.csv"), bad).unwrap();
    let o = ovd(&["matrix", "validate", "--matrix", "bad.csv", "--records", "corpus/curated/train.jsonl"], root);
    assert!(!o.status.success());
    assert!(ovd(&["matrix", "init", "--records", "corpus/curated/train.jsonl", "--out", "init.csv"], root).status.success());
    assert!(std::fs::read_to_string(root.join("init.csv")).unwrap().starts_with("dataset,"));

    // shrink the generated config so training takes seconds
    let cfg_path = corpus.join("config.toml");
    let mut cfg = TrainConfig::load(&cfg_path).unwrap();
    cfg.model.widths = [8, 16, 16];
    cfg.model.context_layers = 1;
    cfg.model.embed_dim = 16;
    cfg.model.token_grid = 2;
    cfg.encoder = ovd_core::encoder::EncoderBackend::AlignedMock { dim: 16, seed: 0 };
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    let original = TrainConfig::from_toml(&text).unwrap();
    cfg.data = original.data;
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();

    let o = ovd(&["train", "--config", "corpus/config.toml", "--out", "run", "--epochs", "2", "--save-every", "1"], root);
    assert!(o.status.success());
    let run = root.join("run");
    for f in ["last.safetensors", "epoch_001.safetensors", "epoch_002.safetensors", "audit.jsonl", "loss.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(run.join("audit.jsonl")).unwrap().lines().count(), 2);

    let o = ovd(&["audit", "run/audit.jsonl"], root);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);

    let o = ovd(&["eval", "--checkpoint", "run/last.safetensors", "--manifest", "corpus/curated/manifest.json", "--out", "report.json"], root);
    assert!(o.status.success());
    assert!(stdout(&o).contains("base+novel"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    for row in report["rows"].as_array().unwrap() {
        let m = row["map50"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }

    let o = ovd(&["fps", "--checkpoint", "run/last.safetensors", "--images", "6", "--warmup", "2", "--runs", "2", "--out", "fps.json"], root);
    assert!(o.status.success());
    let fps: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("fps.json")).unwrap()).unwrap();
    assert!(fps["mean"].as_f64().unwrap() > 0.0);

    let o = ovd(&["visualize", "--checkpoint", "run/last.safetensors", "--out", "vis", "--limit", "3"], root);
    assert!(o.status.success());
    let pngs = std::fs::read_dir(root.join("vis")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 3);
    assert!(root.join("vis/detections.jsonl").exists());

    // a checkpoint whose stored fingerprint no longer matches is refused
    let bytes = std::fs::read(run.join("last.safetensors")).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let at = text.find("config_fingerprint").unwrap();
    let mut tampered = bytes.clone();
    let digit = at + "config_fingerprint\":\"".len();
    tampered[digit] = if tampered[digit] == b'0' { b'1' } else { b'0' };
    std::fs::write(root.join("tampered.safetensors"), tampered).unwrap();
    let o = ovd(&["eval", "--checkpoint", "tampered.safetensors", "--records", "corpus/curated/val.jsonl", "--base", "liver"], root);
    assert!(!o.status.success());
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ovd(&["config", "--out", "c.toml"], dir.path()).status.success());
    let cfg = TrainConfig::load(&dir.path().join("c.toml")).unwrap();
    assert_eq!(cfg, TrainConfig::default());
    assert_eq!(cfg.pseudo_label.iou_threshold, 0.3);
    assert_eq!(cfg.pseudo_label.confidence_threshold, 0.9);
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovd(&["matrix", "validate", "--matrix", "nope.csv", "--records", "nope.jsonl"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}
