//! One forward pass of an untrained EFIN model, printing every intermediate
//! output for a few instances.
//!
//! ```text
//! cargo run --example efin_forward
//! ```

use upliftlab::data::Instance;
use upliftlab::efin::{Efin, EfinConfig, Heads};
use upliftlab::encoder::{FeatureSchema, FeatureSpec, TreatmentCatalog};
use upliftlab::model::UpliftModel;
use upliftlab::tensor::Graph;

fn main() -> anyhow::Result<()> {
    let schema = FeatureSchema::new(
        vec![FeatureSpec::continuous("age", 35.0, 10.0), FeatureSpec::sparse("city", 4), FeatureSpec::continuous("spend", 50.0, 30.0)],
        vec![FeatureSpec::sparse("treatment", 3), FeatureSpec::continuous("amount", 5.0, 4.0)],
    )?;
    let catalog = TreatmentCatalog::new(vec![vec![0.0, 0.0], vec![1.0, 5.0], vec![2.0, 10.0]]);
    let model = Efin::new(schema, catalog, EfinConfig::new(8), 42)?;

    let rows = [
        Instance { x: vec![31.0, 2.0, 120.0], t: vec![0.0, 0.0], y: 0.0 },
        Instance { x: vec![45.0, 0.0, 80.0], t: vec![1.0, 5.0], y: 1.0 },
        Instance { x: vec![22.0, 3.0, 15.0], t: vec![2.0, 10.0], y: 0.0 },
    ];
    let refs: Vec<&Instance> = rows.iter().collect();
    let batch = model.schema().prepare_batch(&refs, None)?;
    let mut g = Graph::new();
    let fw = model.forward(&mut g, &batch, Heads::ALL)?;
    for (i, o) in model.outputs(&g, &fw).iter().enumerate() {
        println!("instance {i} (group {})", rows[i].group());
        println!("  y0 logit  {:+.4}", o.y0_logit);
        println!("  tau_hat   {:+.4}", o.tau_hat);
        println!("  yk logit  {:+.4}", o.yk_logit);
        println!("  alpha     {:.4?}", o.attention_alpha);
        println!("  group     {:+.4?}", o.group_logits);
    }
    let loss = model.loss(&mut g, &fw, &batch)?;
    println!("loss {:.5} on {} tape nodes", g.value(loss.total).item()?, g.len());

    // ranking scores for treatment 2, whatever group each row was observed in
    println!("uplift for treatment 2: {:.4?}", model.score_rows(&refs, 2)?);
    Ok(())
}
