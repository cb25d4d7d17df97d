use super::{Gradients, Graph, ParamStore, TensorError, Var};

/// Worst analytic-vs-numeric discrepancy seen for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// Parameters whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > self.tolerance).collect()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error with a floor on the denominator so that gradients that are
/// zero on both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `loss` against central differences with
/// step `eps`, element by element, for every parameter in `store`.
///
/// `loss` must rebuild the whole computation from `store` on the given graph.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, tolerance: f64, loss: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut graph = Graph::new();
    let out = loss(&mut graph, store)?;
    let mut grads = Gradients::for_store(store);
    graph.backward(out, &mut grads)?;

    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = loss(&mut g, store)?;
        g.value(v).item()
    };

    let mut params = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let original = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = original + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = original - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_err || i == 0 {
                check = ParamCheck { max_rel_err: err, worst_index: i, analytic, numeric, ..check };
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tolerance })
}
