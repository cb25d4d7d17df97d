//! Train EFIN on a synthetic randomized campaign and compare its uplift
//! ranking with the true individual effects.
//!
//! ```text
//! cargo run --release --example ite_recovery -- [seed] [rank] [batch] [lr] [lambda] [disabled]
//! ```
//!
//! `disabled` is a comma list drawn from `self_interaction`,
//! `treatment_aware` and `intervention_constraint`.

use std::time::Instant;

use upliftlab::data::split;
use upliftlab::experiment::prepare_split;
use upliftlab::metrics::{self, spearman};
use upliftlab::model::{ModelSpec, UpliftModel};
use upliftlab::synthetic::{generate, GeneratorConfig};
use upliftlab::train::{score_binary, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seed = arg(0, 0.0) as u64;
    let mut spec = ModelSpec { rank: arg(1, 32.0) as usize, ..ModelSpec::default() };
    let disabled = args.get(5).map(String::as_str).unwrap_or("");
    let off = |name: &str| disabled.split(',').any(|p| p == name);
    spec.modules.self_interaction = !off("self_interaction");
    spec.modules.treatment_aware = !off("treatment_aware");
    spec.modules.intervention_constraint = !off("intervention_constraint");
    let cfg = TrainConfig {
        batch_size: arg(2, 256.0) as usize,
        learning_rate: arg(3, 1e-3),
        lambda: arg(4, 1e-5),
        seed,
        ..TrainConfig::default()
    };

    let structure = GeneratorConfig::linear_rct(8, 1, 20_000, 7, 1000 + seed);
    let (fit, _) = generate(&structure)?;
    let (test, truth) = generate(&GeneratorConfig { n: 5_000, seed: 2000 + seed, ..structure })?;
    let (train_rows, validation) = split(&fit, 0.9, seed)?;
    let p = prepare_split(train_rows, validation, test)?;

    let started = Instant::now();
    let mut model = spec.build(p.schema.clone(), p.catalog.clone(), cfg.loss_weights(), seed)?;
    let outcome = train(&mut model, &p.train, &p.validation, &cfg)?;
    for e in &outcome.epochs {
        println!("epoch {:>2}  loss {:.5}  validation qini {:.4}", e.epoch, e.train_loss, e.validation_qini);
    }

    let rows: Vec<_> = p.test.rows.iter().collect();
    let tau_hat = model.score_rows(&rows, 1)?;
    let tau: Vec<f64> = truth.iter().map(|t| t.tau[0]).collect();
    let records = score_binary(&model, &p.test, 1)?;
    let groups: Vec<usize> = p.test.rows.iter().map(|r| r.group()).collect();
    let ys: Vec<f64> = p.test.rows.iter().map(|r| r.y).collect();
    let oracle = metrics::binary_records(&groups, &ys, &tau, 1);
    println!(
        "best epoch {}  spearman {:.4}  qini {:.4}  oracle qini {:.4}  ({:.1}s)",
        outcome.best_epoch,
        spearman(&tau_hat, &tau)?,
        metrics::qini(&records)?.1,
        metrics::qini(&oracle)?.1,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
