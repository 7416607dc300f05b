use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omnifuse::volume::{RegionMask, Volume3D};

const SMALL_CONFIG: &str = r#"{
  "synth": { "class_counts": [8, 8, 8], "genes_dim": 12, "visits": [1, 2] },
  "selection": { "p_threshold": 0.5, "k": 5 },
  "model": {
    "encoder": { "d": 8, "layers": 1, "heads": 2, "d_ff": 8 },
    "fusion": { "heads": 2, "classifier_hidden": 8 }
  },
  "train": { "lr": 0.001, "max_epochs": 3, "patience": 2, "batch_size": 16 },
  "cv": { "folds": 3 },
  "explain": { "permutations": 50, "background_size": 20 }
}"#;

fn omnifuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnifuse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = omnifuse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(ws.path("config.json"), SMALL_CONFIG).unwrap();
        ok(&["synth", "--config", p(&ws.path("config.json")), "--seed", "3", "--out", p(&ws.path("data"))]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        p(&self.path("config.json")).to_string()
    }

    fn data(&self) -> String {
        p(&self.path("data")).to_string()
    }
}

#[test]
fn synth_is_reproducible_and_counts_patients() {
    let ws = Workspace::new();
    ok(&["synth", "--config", &ws.config(), "--seed", "3", "--out", p(&ws.path("again"))]);
    for file in ["dataset.json", "samples.csv", "tabular.csv", "genes.csv", "meta.csv", "gm_embeddings.csv"] {
        assert_eq!(std::fs::read(ws.path("data").join(file)).unwrap(), std::fs::read(ws.path("again").join(file)).unwrap(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("data/dataset.json")).unwrap()).unwrap();
    for class in ["CTL", "MCI", "AD"] {
        assert_eq!(manifest["patient_counts"][class], 8);
    }
    assert_eq!(manifest["provenance"]["seed"], 3);
}

#[test]
fn cv_is_byte_identical_across_runs_and_workers() {
    let ws = Workspace::new();
    let run = |name: &str, workers: &str| {
        ok(&["cv", "--config", &ws.config(), "--data", &ws.data(), "--seed", "5", "--parallel-folds", workers, "--out", p(&ws.path(name))]);
    };
    run("a", "1");
    run("b", "1");
    run("c", "3");
    for file in ["cv_report.json", "history.csv", "config.json"] {
        let a = std::fs::read(ws.path("a").join(file)).unwrap();
        assert_eq!(a, std::fs::read(ws.path("b").join(file)).unwrap(), "{file} differs between runs");
        assert_eq!(a, std::fs::read(ws.path("c").join(file)).unwrap(), "{file} differs across workers");
    }
    let history = std::fs::read_to_string(ws.path("a/history.csv")).unwrap();
    assert!(history.starts_with("# config_hash="));
    assert!(history.lines().nth(1).unwrap() == "fold,epoch,train_loss,val_loss");
}

#[test]
fn train_then_predict_eval_and_explain() {
    let ws = Workspace::new();
    let model = ws.path("model");
    ok(&["train", "--config", &ws.config(), "--data", &ws.data(), "--out", p(&model)]);
    assert!(model.join("model.json").exists() && model.join("model.oft").exists());

    ok(&["predict", "--data", &ws.data(), "--model", p(&model), "--mask", "genes,meta", "--out", p(&ws.path("pred"))]);
    let csv = std::fs::read_to_string(ws.path("pred/predictions.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    let samples = std::fs::read_to_string(ws.path("data/samples.csv")).unwrap();
    assert_eq!(rows.len(), samples.lines().filter(|l| !l.starts_with('#')).count() - 1);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let total: f64 = cols[2..5].iter().map(|c| c.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(["CTL", "MCI", "AD"].contains(&cols[5]));
    }

    ok(&["eval", "--data", &ws.data(), "--model", p(&model), "--out", p(&ws.path("eval"))]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("eval/eval_report.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report["provenance"]["config_hash"].is_string());

    for method in ["mc", "grad"] {
        let out = ws.path(&format!("explain_{method}"));
        ok(&["explain", "--config", &ws.config(), "--data", &ws.data(), "--model", p(&model), "--method", method, "--out", p(&out)]);
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("attributions.json")).unwrap()).unwrap();
        assert_eq!(doc["features"].as_array().unwrap().len(), doc["phi"].as_array().unwrap().len());
    }

    let out = omnifuse(&["explain", "--data", &ws.data(), "--model", p(&model), "--method", "exact", "--out", p(&ws.path("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[ArityError]"));
}

#[test]
fn radiomics_writes_one_row_per_feature() {
    let dir = tempfile::tempdir().unwrap();
    let vol = Volume3D::from_fn([5, 5, 5], |x, y, z| (x * 7 + y * 3 + z) as f32).unwrap();
    let mut labels = vec![1u16; 125];
    labels[..25].iter_mut().for_each(|l| *l = 2);
    vol.save(&dir.path().join("v.obv")).unwrap();
    RegionMask::new([5, 5, 5], [1.0; 3], labels).unwrap().save(&dir.path().join("m.obm")).unwrap();
    let out = dir.path().join("out");
    ok(&["radiomics", "--volume", p(&dir.path().join("v.obv")), "--labels", p(&dir.path().join("m.obm")), "--bins", "8", "--out", p(&out)]);
    let csv = std::fs::read_to_string(out.join("radiomics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines[1], "region,feature,value");
    assert_eq!(lines.len(), 2 + 2 * 7);
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let missing = omnifuse(&["train", "--data", "/nonexistent/omnifuse", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));

    let unknown = omnifuse(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).starts_with("error[UsageError]"));

    let bad_mask = omnifuse(&["cv", "--data", out, "--mask", "genes,eyes", "--out", out]);
    assert_eq!(bad_mask.status.code(), Some(1));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let bad = omnifuse(&["synth", "--config", p(&cfg), "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error[ConfigError]"));

    assert_eq!(omnifuse(&["--help"]).status.code(), Some(0));
}
