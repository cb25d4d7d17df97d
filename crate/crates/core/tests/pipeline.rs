//! Library-level flows that cross module boundaries.

use std::path::Path;

use upliftlab::data::{load_csv, Declarations};
use upliftlab::experiment::{run_ablate, run_generate, run_train, ExperimentConfig};

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn generated_csv_trains_through_a_csv_source() {
    let dir = tempfile::tempdir().unwrap();
    let gen = ExperimentConfig::from_json(
        r#"{"data": {"source": {"kind": "synthetic", "d_x": 4, "treatments": 1, "n": 2000, "seed": 9}}}"#,
    )
    .unwrap();
    let csv = run_generate(&gen, dir.path()).unwrap();
    let decl: Declarations =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("synthetic.declarations.json")).unwrap()).unwrap();
    let loaded = load_csv(&csv, &decl).unwrap();
    assert_eq!(loaded.dataset.len(), 2000);
    assert!(loaded.skipped.is_empty());

    let text = serde_json::json!({
        "data": {"source": {"kind": "csv", "path": csv, "declarations": decl}},
        "model": {"kind": "tlearner", "rank": 4},
        "train": {"batch_size": 128, "learning_rate": 0.01, "max_epochs": 2}
    });
    let cfg = ExperimentConfig::from_json(&text.to_string()).unwrap();
    let report = run_train(&cfg, &dir.path().join("run")).unwrap();
    assert_eq!(report.test.per_treatment.len(), 1);
    assert!(report.test.average.qini.is_finite());
}

#[test]
fn ablation_writes_one_report_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(
        r#"{"data": {"source": {"kind": "synthetic", "d_x": 3, "treatments": 1, "n": 1200, "confounding": 1.0}},
            "model": {"rank": 4},
            "train": {"batch_size": 128, "learning_rate": 0.01, "max_epochs": 2}}"#,
    )
    .unwrap();
    let rows = run_ablate(&cfg, dir.path()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_self_interaction", "no_treatment_aware", "no_intervention_constraint"]);
    for n in names {
        assert!(dir.path().join("ablation").join(n).join("report.json").exists());
    }
    assert!(dir.path().join("ablation.json").exists());
}
