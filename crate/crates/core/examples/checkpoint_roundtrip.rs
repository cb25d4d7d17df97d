//! Save a trained model, load it back against the expected schema, and
//! confirm the scores are bit-identical.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip -- [path.ckpt]
//! ```

use upliftlab::checkpoint;
use upliftlab::data::{split, Instance};
use upliftlab::experiment::prepare_split;
use upliftlab::model::{ModelSpec, UpliftModel};
use upliftlab::synthetic::{generate, GeneratorConfig};
use upliftlab::train::{mean_qini, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("upliftlab-example.ckpt").display().to_string());
    let (data, _) = generate(&GeneratorConfig::linear_rct(5, 2, 6_000, 4, 4))?;
    let (fit, test) = split(&data, 0.8, 0)?;
    let (tr, va) = split(&fit, 0.9, 1)?;
    let p = prepare_split(tr, va, test)?;

    let cfg = TrainConfig { max_epochs: 5, learning_rate: 5e-3, ..TrainConfig::default() };
    let mut model = ModelSpec { rank: 8, ..ModelSpec::default() }.build(p.schema.clone(), p.catalog.clone(), cfg.loss_weights(), 0)?;
    train(&mut model, &p.train, &p.validation, &cfg)?;
    let qini = mean_qini(&model, &p.test)?;
    checkpoint::save(&model, &serde_json::json!({ "test_qini": qini }), &path)?;
    println!("saved {path} ({} bytes)", std::fs::metadata(&path)?.len());

    let loaded = checkpoint::load(&path, Some(&p.schema))?;
    println!("metadata {}", loaded.metadata);
    let rows: Vec<&Instance> = p.test.rows.iter().collect();
    for k in 1..=2 {
        let same = model.score_rows(&rows, k)? == loaded.model.score_rows(&rows, k)?;
        println!("treatment {k}: scores identical after reload: {same}");
    }
    println!("test qini after reload {:+.4} (before {qini:+.4})", mean_qini(&loaded.model, &p.test)?);
    Ok(())
}
