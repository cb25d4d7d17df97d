//! The `upliftlab` binary end to end: outputs on disk and exit codes.

use std::path::Path;
use std::process::Command;

fn upliftlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_upliftlab")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL: &str = r#"{
  "data": {"source": {"kind": "synthetic", "d_x": 4, "treatments": 2, "n": 1500, "seed": 3}},
  "model": {"rank": 4},
  "train": {"batch_size": 128, "learning_rate": 0.01, "max_epochs": 3, "seed": 1}
}"#;

#[test]
fn train_then_evaluate_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("run");
    let out_s = out.display().to_string();

    let t = upliftlab(&["train", "--config", &cfg, "--out", &out_s]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    for f in ["report.json", "model.ckpt", "qini_k1.csv", "qini_k2.csv", "uplift_k1.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let e = upliftlab(&["evaluate", "--config", &cfg, "--out", &out_s]);
    assert_eq!(e.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&e.stdout).contains("matches checkpoint: Some(true)"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let report = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = upliftlab(&["train", "--config", &cfg, "--seed", seed, "--out", &out.display().to_string()]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        (v["seed"].clone(), v["test"].clone())
    };
    let (s1, t1) = report("11", "a");
    let (s2, t2) = report("12", "b");
    assert_eq!(s1, 11);
    assert_eq!(s2, 12);
    assert_ne!(t1, t2);
}

#[test]
fn generate_and_score_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("gen").display().to_string();
    let g = upliftlab(&["generate", "--config", &cfg, "--out", &out]);
    assert_eq!(g.status.code(), Some(0));
    assert!(dir.path().join("gen/synthetic.truth.csv").exists());

    let scored = write(dir.path(), "s.csv", "score,treated,response\n0.9,1,1\n0.8,0,0\n0.7,1,0\n0.1,0,1\n");
    let s = upliftlab(&["score-file", "--config", &cfg, "--input", &scored, "--out", &out]);
    assert_eq!(s.status.code(), Some(0), "{}", String::from_utf8_lossy(&s.stderr));
    assert!(dir.path().join("gen/metrics.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let bad_field = write(dir.path(), "a.json", &SMALL.replace("\"batch_size\": 128", "\"batch_size\": 0"));
    let unknown = write(dir.path(), "b.json", &SMALL.replace("\"rank\": 4", "\"rnak\": 4"));
    let missing = dir.path().join("nope.json").display().to_string();
    for cfg in [bad_field, unknown, missing] {
        let o = upliftlab(&["train", "--config", &cfg, "--out", &out]);
        assert_eq!(o.status.code(), Some(2), "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("upliftlab: "));
    }
}

#[test]
fn undefined_metric_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let all_treated = write(dir.path(), "s.csv", "score,treated,response\n0.9,1,1\n0.2,1,0\n");
    let o = upliftlab(&["score-file", "--config", &cfg, "--input", &all_treated, "--out", &dir.path().display().to_string()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &SMALL.replace("\"learning_rate\": 0.01", "\"learning_rate\": 1e300"));
    let o = upliftlab(&["train", "--config", &cfg, "--out", &dir.path().display().to_string()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
