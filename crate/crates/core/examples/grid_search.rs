//! Seeded random search over a slice of the hyperparameter grid, with the
//! leaderboard written as JSON lines.
//!
//! ```text
//! cargo run --release --example grid_search -- [budget] [leaderboard.jsonl]
//! ```

use std::path::PathBuf;

use upliftlab::data::split;
use upliftlab::experiment::prepare_split;
use upliftlab::model::ModelSpec;
use upliftlab::search::{grid_search, Grid, SearchConfig, TrialStatus, Traversal};
use upliftlab::synthetic::{generate, GeneratorConfig};
use upliftlab::train::{mean_qini, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let budget: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let leaderboard = args.next().map(PathBuf::from);

    let structure = GeneratorConfig::linear_rct(6, 1, 8_000, 9, 1);
    let (fit, _) = generate(&structure)?;
    let (test, _) = generate(&GeneratorConfig { n: 3_000, seed: 2, ..structure })?;
    let (tr, va) = split(&fit, 0.9, 0)?;
    let p = prepare_split(tr, va, test)?;

    let grid = Grid { rank: vec![8, 16], batch_size: vec![256, 1024], learning_rate: vec![1e-3, 1e-2], lambda: vec![1e-5, 1e-3] };
    println!("{} of {} grid points", budget.min(grid.len()), grid.len());
    let search = SearchConfig { grid, traversal: Traversal::Random { budget, seed: 3 } };
    let base = TrainConfig { max_epochs: 10, ..TrainConfig::default() };
    let out = grid_search(&ModelSpec::default(), &base, &search, &p.schema, &p.catalog, &p.train, &p.validation, 0, leaderboard.as_deref())?;

    for e in &out.leaderboard {
        let t = &e.trial;
        let status = match &e.status {
            TrialStatus::Completed { validation_qini, best_epoch, .. } => format!("validation qini {validation_qini:+.4} (epoch {best_epoch})"),
            TrialStatus::Diverged { detail } => format!("diverged: {detail}"),
        };
        println!("#{:>3} rank {:>2} bs {:>4} lr {:<6} lambda {:<6} {status}", t.index, t.rank, t.batch_size, t.learning_rate, t.lambda);
    }
    println!("selected trial #{}; test qini {:+.4}", out.best.index, mean_qini(&out.model, &p.test)?);
    Ok(())
}
