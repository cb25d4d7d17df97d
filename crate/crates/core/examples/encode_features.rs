//! Infer a feature schema from a small dataset and embed one instance.
//!
//! ```text
//! cargo run --example encode_features
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upliftlab::data::{ColumnDecl, Dataset, Declarations, Instance};
use upliftlab::encoder::{EncoderOptions, EncoderParams, FeatureSchema};
use upliftlab::tensor::ParamStore;

fn main() -> anyhow::Result<()> {
    let declarations = Declarations {
        x: vec![ColumnDecl::continuous("age"), ColumnDecl::sparse("city", Some(4)), ColumnDecl::continuous("spend")],
        t: vec![ColumnDecl::sparse("treatment", Some(3)), ColumnDecl::continuous("amount")],
        response: "converted".into(),
        ignore: Vec::new(),
    };
    let rows = vec![
        Instance { x: vec![31.0, 2.0, 120.0], t: vec![0.0, 0.0], y: 0.0 },
        Instance { x: vec![45.0, 0.0, 80.0], t: vec![1.0, 5.0], y: 1.0 },
        Instance { x: vec![22.0, 3.0, 15.0], t: vec![2.0, 10.0], y: 0.0 },
        Instance { x: vec![38.0, 1.0, 60.0], t: vec![1.0, 5.0], y: 1.0 },
    ];
    let dataset = Dataset::new(declarations, rows, "inline")?;

    // standardization statistics come from the data
    let schema = FeatureSchema::build(&dataset)?;
    println!("schema hash {}", schema.hash());
    println!("{}", schema.to_json());

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = EncoderParams::init(&schema, EncoderOptions::new(4), true, &mut store, "encoder", &mut rng);
    let (ex, et) = encoder.encode_instance(&store, &schema, &dataset.rows[1])?;
    for (spec, e) in schema.x.iter().zip(&ex) {
        println!("x {:<10} {:?}", spec.name, e);
    }
    for (spec, e) in schema.t.iter().zip(&et) {
        println!("t {:<10} {:?}", spec.name, e);
    }
    println!("{} parameter tensors, {} values", store.len(), store.numel());
    Ok(())
}
