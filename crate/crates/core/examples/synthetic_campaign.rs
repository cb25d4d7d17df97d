//! Generate randomized and confounded campaigns and summarize what the
//! hidden truth looks like in each.
//!
//! ```text
//! cargo run --example synthetic_campaign -- [out_dir]
//! ```

use std::path::PathBuf;

use upliftlab::synthetic::{self, generate, GeneratorConfig};

fn summarize(label: &str, cfg: &GeneratorConfig) -> anyhow::Result<()> {
    let (data, truth) = generate(cfg)?;
    println!("{label}: {} rows", data.len());
    for g in 0..=cfg.treatments() {
        let rows: Vec<_> = data.rows.iter().zip(&truth).filter(|(r, _)| r.group() == g).collect();
        let rate = rows.iter().map(|(r, _)| r.y).sum::<f64>() / rows.len() as f64;
        let x0 = rows.iter().map(|(r, _)| r.x[0]).sum::<f64>() / rows.len() as f64;
        println!("  group {g}: n {:>5}  response rate {rate:.3}  mean x0 {x0:+.3}", rows.len());
    }
    for k in 1..=cfg.treatments() {
        let tau: Vec<f64> = truth.iter().map(|t| t.tau[k - 1]).collect();
        let mean = tau.iter().sum::<f64>() / tau.len() as f64;
        let positive = tau.iter().filter(|t| **t > 0.0).count() as f64 / tau.len() as f64;
        println!("  treatment {k}: mean tau {mean:+.4}  share with positive effect {positive:.2}");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let rct = GeneratorConfig::linear_rct(6, 2, 10_000, 1, 7);
    summarize("randomized", &rct)?;
    let confounded = rct.clone().confounded(1.5);
    summarize("confounded", &confounded)?;

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir)?;
        let (data, truth) = generate(&confounded)?;
        synthetic::save(&data, &truth, &dir, "confounded")?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
