use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "synth": {"n_classes": 3, "bags_per_class": 10, "d": 8},
  "model": {"d": 8, "n_prototypes": 2, "n_context": 2, "tau": 0.1},
  "train": {"min_epochs": 2, "patience": 1, "max_epochs": 3, "shots": 2, "runs": 2}
}"#;

fn vila(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.json");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_vila"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = vila(dir.path(), &["train", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("t");
    let manifest = json(&out.join("run_manifest.json"));
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["d"], 8);
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for name in ["params.json", "curve.csv", "report.json"] {
        assert!(out.join(name).exists(), "{name}");
        assert_eq!(artifacts[name].as_str().unwrap().len(), 64);
    }
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss,train_acc,val_acc\n"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "model.n_prototypes=0"],
        vec!["train", "model.unknown=1"],
        vec!["train", "model.d=16"],
        vec!["train", "data.manifest=missing.json"],
        vec!["train", "model.fusion=feature_summation", "model.similarity=instance_max"],
        vec!["explain"],
        vec!["train", "nonsense"],
    ] {
        let o = vila(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "), "{args:?}");
    }
    let o = vila(dir.path(), &["train", "model.unknown=1"]);
    assert!(stderr(&o).contains("model.unknown"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = vila(dir.path(), &["train", "--out", "t", "train.learning_rate=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vila(dir.path(), &["gradcheck", "--out", "g"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(&dir.path().join("g/gradcheck.json"));
    assert_eq!(report["parameters"].as_array().unwrap().len(), 12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("all checks passed"));
}

#[test]
fn synth_then_explain() {
    let dir = tempfile::tempdir().unwrap();
    let o = vila(dir.path(), &["synth", "--out", "s", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = json(&dir.path().join("s/manifest.json"));
    assert_eq!(manifest["bags"].as_array().unwrap().len(), 30);
    let o = vila(dir.path(), &["train", "--out", "t", "data.manifest=s/manifest.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = vila(
        dir.path(),
        &["explain", "--out", "x", "explain.params=t/params.json", "explain.bag=s/bags/bag_0003.vlmb"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let e = json(&dir.path().join("x/explanation.json"));
    assert_eq!(e["bag_id"], "bag_0003");
    assert_eq!(e["scale"], "high");
    let assignments = e["assignments"].as_array().unwrap();
    assert!(!assignments.is_empty());
    assert!(assignments.iter().all(|a| a["prototype"].as_u64().unwrap() < 2));
}

#[test]
fn sweep_marks_unreachable_shots_as_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let o = vila(dir.path(), &["sweep", "--out", "w", "sweep.axis=shots", "sweep.values=[2,64]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = json(&dir.path().join("w/sweep.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows[0]["status"], "ok");
    assert!(rows[1]["status"].as_str().unwrap().starts_with("skipped"));
    assert!(rows[1]["acc"].is_null());
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vila(dir.path(), &["synth", "--out", "a", "--seed", "1"]).status.success());
    assert!(vila(dir.path(), &["synth", "--out", "b", "--seed", "2"]).status.success());
    let a = json(&dir.path().join("a/run_manifest.json"));
    let b = json(&dir.path().join("b/run_manifest.json"));
    assert_eq!(a["master_seed"], 1);
    assert_ne!(a["artifacts"]["bags/bag_0000.vlmb"], b["artifacts"]["bags/bag_0000.vlmb"]);
}
