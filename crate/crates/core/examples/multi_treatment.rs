//! Several treatments at once: per-treatment binary metrics and their
//! average, plus which treatment the model would assign to each user.
//!
//! ```text
//! cargo run --release --example multi_treatment -- [treatments]
//! ```

use upliftlab::data::{split, Instance};
use upliftlab::experiment::prepare_split;
use upliftlab::metrics::{spearman, MetricOptions};
use upliftlab::model::{ModelSpec, UpliftModel};
use upliftlab::synthetic::{generate, GeneratorConfig};
use upliftlab::train::{evaluate, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let treatments: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let structure = GeneratorConfig::linear_rct(8, treatments, 6_000 * (treatments + 1), 21, 1);
    let (fit, _) = generate(&structure)?;
    let (test, truth) = generate(&GeneratorConfig { n: 2_000 * (treatments + 1), seed: 2, ..structure })?;
    let (tr, va) = split(&fit, 0.9, 0)?;
    let p = prepare_split(tr, va, test)?;

    let cfg = TrainConfig { batch_size: 1024, learning_rate: 3e-3, lambda: 1e-5, max_epochs: 15, ..TrainConfig::default() };
    let mut model = ModelSpec { rank: 16, ..ModelSpec::default() }.build(p.schema.clone(), p.catalog.clone(), cfg.loss_weights(), 0)?;
    train(&mut model, &p.train, &p.validation, &cfg)?;

    let eval = evaluate(&model, &p.test, &MetricOptions::default())?;
    let rows: Vec<&Instance> = p.test.rows.iter().collect();
    let mut scores = Vec::new();
    for (k, m) in (1..=treatments).zip(&eval.per_treatment) {
        let s = model.score_rows(&rows, k)?;
        let tau: Vec<f64> = truth.iter().map(|t| t.tau[k - 1]).collect();
        println!("treatment {k}: qini {:+.4}  auuc {:+.4}  spearman vs truth {:+.3}", m.qini, m.auuc, spearman(&s, &tau)?);
        scores.push(s);
    }
    println!("average:     qini {:+.4}  auuc {:+.4}", eval.average.qini, eval.average.auuc);

    // best treatment per user, by predicted and by true effect
    let argmax = |v: &mut dyn Iterator<Item = f64>| v.enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).map_or(0, |(i, _)| i);
    let agree = (0..rows.len())
        .filter(|&i| argmax(&mut scores.iter().map(|s| s[i])) == argmax(&mut truth[i].tau.iter().copied()))
        .count();
    println!("best-treatment agreement with truth: {:.3}", agree as f64 / rows.len() as f64);
    Ok(())
}
