//! Metrics on scored records: curves, normalized areas, LIFT@h and WAU.
//!
//! ```text
//! cargo run --example uplift_metrics -- [scored.csv]
//! ```
//!
//! The optional CSV has columns `score,treated,response`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upliftlab::metrics::{self, MetricOptions, ScoredRecord};

fn report(label: &str, records: &[ScoredRecord]) -> anyhow::Result<()> {
    let s = metrics::summarize(records, &MetricOptions::default())?;
    println!("{label:<8} lift@30 {:+.4}  qini {:+.4}  auuc {:+.4}  wau {:+.4}", s.lift, s.qini, s.auuc, s.wau);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    if let Some(path) = std::env::args().nth(1) {
        let records = metrics::read_scored_csv(std::fs::File::open(path)?)?;
        return report("file", &records);
    }

    // treated users respond more when their latent uplift u is high
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base: Vec<(f64, bool, f64)> = (0..20_000)
        .map(|_| {
            let u: f64 = rng.random();
            let treated = rng.random_bool(0.5);
            let p = 0.1 + if treated { 0.3 * u } else { 0.0 };
            (u, treated, rng.random_bool(p) as u8 as f64)
        })
        .collect();
    let informed: Vec<ScoredRecord> = base.iter().map(|&(u, t, y)| ScoredRecord::new(u, t, y)).collect();
    let noisy: Vec<ScoredRecord> = base.iter().map(|&(u, t, y)| ScoredRecord::new(u + rng.random_range(-0.5..0.5), t, y)).collect();
    let random: Vec<ScoredRecord> = base.iter().map(|&(_, t, y)| ScoredRecord::new(rng.random(), t, y)).collect();
    report("latent", &informed)?;
    report("noisy", &noisy)?;
    report("random", &random)?;

    let (curve, _) = metrics::qini(&informed)?;
    println!("qini curve at deciles:");
    for d in 1..=10 {
        let i = d * (curve.values.len() - 1) / 10;
        println!("  {:.1}  {:8.1}", curve.fractions[i], curve.values[i]);
    }
    Ok(())
}
