use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::uniform_tensor;
use crate::tensor::{Graph, ParamId, ParamStore, TensorError, Var};

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    /// Uniform init in `±1/sqrt(fan_in)` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        Dense {
            weight: store.add(format!("{name}.weight"), uniform_tensor(rng, &[fan_in, fan_out], scale)),
            bias: store.add(format!("{name}.bias"), uniform_tensor(rng, &[fan_out], scale)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let widths: Vec<usize> = std::iter::once(input).chain(hidden.iter().copied()).chain([output]).collect();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(store, &format!("{prefix}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}
