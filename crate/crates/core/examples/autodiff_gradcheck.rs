//! Build a small logistic-regression graph on the tape, backpropagate, and
//! compare against central finite differences.
//!
//! ```text
//! cargo run --example autodiff_gradcheck
//! ```

use upliftlab::tensor::{grad_check, Gradients, Graph, ParamStore, Tensor};

fn main() -> anyhow::Result<()> {
    let x = Tensor::matrix(&[&[0.5, -1.0, 2.0], &[1.5, 0.3, -0.7], &[-0.2, 0.8, 0.1], &[1.0, 0.5, 1.0]]);
    let y = [1.0, 0.0, 1.0, 0.0];
    let weights = [0.25; 4];

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2])?);
    let v = store.add("v", Tensor::new(vec![2, 1], vec![0.7, -0.3])?);
    let b = store.add("b", Tensor::vector(vec![0.1]));

    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.constant(x.clone())?;
        let (wv, vv, bv) = (g.param(s, w)?, g.param(s, v)?, g.param(s, b)?);
        let h = g.matmul(xv, wv)?;
        let h = g.relu(h)?;
        let z = g.matmul(h, vv)?;
        let z = g.add_bias(z, bv)?;
        let z = g.reshape(z, &[4])?;
        g.bce_with_logits(z, &y, &weights)
    };

    let mut g = Graph::new();
    let out = loss(&mut g, &store)?;
    let mut grads = Gradients::for_store(&store);
    g.backward(out, &mut grads)?;
    println!("loss {:.6}", g.value(out).item()?);
    for (id, name, _) in store.iter() {
        println!("  d/d{name} = {:?}", grads.get(id).map(|t| t.data().to_vec()));
    }

    let report = grad_check(&mut store, 1e-6, 1e-6, loss)?;
    for p in &report.params {
        println!("{:>2}: max rel err {:.2e}", p.name, p.max_rel_err);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
