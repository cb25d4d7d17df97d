//! EFIN, S-Learner and T-Learner trained with the same budget on one
//! synthetic campaign, compared on the held-out split.
//!
//! ```text
//! cargo run --release --example baselines_compare -- [seed]
//! ```

use upliftlab::data::split;
use upliftlab::experiment::prepare_split;
use upliftlab::metrics::MetricOptions;
use upliftlab::model::{ModelKind, ModelSpec, UpliftModel};
use upliftlab::synthetic::{generate, GeneratorConfig};
use upliftlab::train::{evaluate, train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let structure = GeneratorConfig::linear_rct(8, 1, 12_000, 3, 100 + seed);
    let (fit, _) = generate(&structure)?;
    let (test, _) = generate(&GeneratorConfig { n: 4_000, seed: 200 + seed, ..structure })?;
    let (tr, va) = split(&fit, 0.9, seed)?;
    let p = prepare_split(tr, va, test)?;

    let cfg = TrainConfig { batch_size: 512, learning_rate: 3e-3, lambda: 1e-5, max_epochs: 15, seed, ..TrainConfig::default() };
    for kind in [ModelKind::Efin, ModelKind::SLearner, ModelKind::TLearner] {
        let spec = ModelSpec { kind, rank: 16, ..ModelSpec::default() };
        let mut model = spec.build(p.schema.clone(), p.catalog.clone(), cfg.loss_weights(), seed)?;
        let outcome = train(&mut model, &p.train, &p.validation, &cfg)?;
        let e = evaluate(&model, &p.test, &MetricOptions::default())?.average;
        println!(
            "{:<10} params {:>6}  best epoch {:>2}  qini {:+.4}  auuc {:+.4}  lift@30 {:+.4}",
            format!("{kind:?}"),
            model.store().numel(),
            outcome.best_epoch,
            e.qini,
            e.auuc,
            e.lift
        );
    }
    Ok(())
}
