//! Synthetic marketing campaigns with known potential outcomes.
//!
//! Features are independent standard normals. The natural response is
//! `p0 = sigmoid(w0 . x + b0)`; treatment `k` adds
//! `tau_k = tanh(a_k . x + c_k + g_k * x0 * x1) * bound` where `bound` is the
//! effect range capped so that `p0 + tau_k` stays inside `[0, 1]`. The
//! natural response is never truncated.

use std::io::Write;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnDecl, DataError, Dataset, Declarations, Instance};
use crate::tensor::sigmoid;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("infeasible effect range {0}; must lie in [0, 1]")]
    EffectRange(f64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum Assignment {
    /// Fixed group probabilities `pi_0..=pi_K`.
    Rct { probabilities: Vec<f64> },
    /// `pi = softmax(W x + b)` with one logit row per group.
    Confounded { weights: Vec<Vec<f64>>, intercepts: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub weights: Vec<f64>,
    pub offset: f64,
    /// Coefficient of the `x0 * x1` interaction term.
    #[serde(default)]
    pub interaction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_x: usize,
    pub n: usize,
    pub natural_weights: Vec<f64>,
    pub natural_intercept: f64,
    /// One entry per treatment `1..=K`.
    pub effects: Vec<EffectSpec>,
    /// Largest absolute ITE on the probability scale.
    pub max_effect: f64,
    /// Treatment "amount" feature of group `k` is `amount_step * k`.
    pub amount_step: f64,
    pub assignment: Assignment,
    pub seed: u64,
}

/// Hidden per-instance truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub p0: f64,
    /// `tau[k-1]` is the ITE of treatment `k`.
    pub tau: Vec<f64>,
    /// Assignment probabilities for groups `0..=K`.
    pub pi: Vec<f64>,
}

impl GeneratorConfig {
    pub fn treatments(&self) -> usize {
        self.effects.len()
    }

    /// Random linear effect surfaces drawn from `structure_seed`, with a
    /// balanced randomized assignment.
    pub fn linear_rct(d_x: usize, treatments: usize, n: usize, structure_seed: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let mut draw = |len: usize, scale: f64| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(-scale..scale)).collect()
        };
        let natural_weights = draw(d_x, 0.8);
        let effects = (1..=treatments)
            .map(|k| EffectSpec {
                weights: draw(d_x, 1.0),
                offset: 0.15 * k as f64,
                interaction: 0.0,
            })
            .collect();
        let p = 1.0 / (treatments + 1) as f64;
        GeneratorConfig {
            d_x,
            n,
            natural_weights,
            natural_intercept: -0.5,
            effects,
            max_effect: 0.25,
            amount_step: 1.0,
            assignment: Assignment::Rct { probabilities: vec![p; treatments + 1] },
            seed,
        }
    }

    /// Same outcome surfaces with assignment driven by the first features.
    pub fn confounded(mut self, strength: f64) -> Self {
        let groups = self.treatments() + 1;
        let weights = (0..groups)
            .map(|g| {
                (0..self.d_x)
                    .map(|j| match (g, j) {
                        (0, _) => 0.0,
                        (_, 0) => strength,
                        (_, 1) => -0.5 * strength,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        self.assignment = Assignment::Confounded { weights, intercepts: vec![0.0; groups] };
        self
    }

    /// No treatment effect at all.
    pub fn zero_effect(mut self) -> Self {
        for e in &mut self.effects {
            e.weights.iter_mut().for_each(|w| *w = 0.0);
            e.offset = 0.0;
            e.interaction = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let fail = |m: String| Err(SyntheticError::Config(m));
        if !(0.0..=1.0).contains(&self.max_effect) || self.max_effect.is_nan() {
            return Err(SyntheticError::EffectRange(self.max_effect));
        }
        if self.d_x == 0 || self.n == 0 || self.effects.is_empty() {
            return fail("d_x, n and the number of treatments must be positive".into());
        }
        if self.natural_weights.len() != self.d_x || self.effects.iter().any(|e| e.weights.len() != self.d_x) {
            return fail(format!("weight vectors must have length d_x = {}", self.d_x));
        }
        let groups = self.treatments() + 1;
        match &self.assignment {
            Assignment::Rct { probabilities } => {
                if probabilities.len() != groups || probabilities.iter().any(|p| *p < 0.0) {
                    return fail(format!("need {groups} non-negative assignment probabilities"));
                }
                if (probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return fail("assignment probabilities must sum to 1".into());
                }
            }
            Assignment::Confounded { weights, intercepts } => {
                if weights.len() != groups || intercepts.len() != groups || weights.iter().any(|w| w.len() != self.d_x) {
                    return fail(format!("confounded policy needs {groups} rows of {} weights", self.d_x));
                }
            }
        }
        Ok(())
    }

    pub fn declarations(&self) -> Declarations {
        Declarations {
            x: (0..self.d_x).map(|j| ColumnDecl::continuous(format!("x{j}"))).collect(),
            t: vec![ColumnDecl::sparse("treatment", Some(self.treatments() + 1)), ColumnDecl::continuous("amount")],
            response: "y".into(),
            ignore: vec![],
        }
    }

    fn propensities(&self, x: &[f64]) -> Vec<f64> {
        match &self.assignment {
            Assignment::Rct { probabilities } => probabilities.clone(),
            Assignment::Confounded { weights, intercepts } => {
                let logits: Vec<f64> =
                    weights.iter().zip(intercepts).map(|(w, b)| dot(w, x) + b).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / total).collect()
            }
        }
    }

    /// Ground truth for a feature vector.
    pub fn truth(&self, x: &[f64]) -> SyntheticTruth {
        let p0 = sigmoid(dot(&self.natural_weights, x) + self.natural_intercept);
        let tau = self
            .effects
            .iter()
            .map(|e| {
                let inter = if x.len() >= 2 { e.interaction * x[0] * x[1] } else { 0.0 };
                let shape = (dot(&e.weights, x) + e.offset + inter).tanh();
                let bound = if shape >= 0.0 { self.max_effect.min(1.0 - p0) } else { self.max_effect.min(p0) };
                shape * bound
            })
            .collect();
        SyntheticTruth { p0, tau, pi: self.propensities(x) }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `config.n` instances and their hidden truths.
pub fn generate(config: &GeneratorConfig) -> Result<(Dataset, Vec<SyntheticTruth>), SyntheticError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.n);
    let mut truths = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let x: Vec<f64> = (0..config.d_x).map(|_| rng.sample(StandardNormal)).collect();
        let truth = config.truth(&x);
        let group = WeightedIndex::new(&truth.pi)
            .map_err(|e| SyntheticError::Config(format!("propensities: {e}")))?
            .sample(&mut rng);
        let p = if group == 0 { truth.p0 } else { truth.p0 + truth.tau[group - 1] };
        let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        let t = vec![group as f64, config.amount_step * group as f64];
        rows.push(Instance { x, t, y });
        truths.push(truth);
    }
    let provenance = format!("synthetic seed {} n {}", config.seed, config.n);
    Ok((Dataset::new(config.declarations(), rows, provenance)?, truths))
}

/// Writes `p0,tau_1..tau_K,pi_0..pi_K` rows.
pub fn write_truth_csv<W: Write>(truths: &[SyntheticTruth], mut w: W) -> std::io::Result<()> {
    let k = truths.first().map_or(0, |t| t.tau.len());
    let mut header = vec!["p0".to_string()];
    header.extend((1..=k).map(|i| format!("tau_{i}")));
    header.extend((0..=k).map(|i| format!("pi_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for t in truths {
        let fields: Vec<String> = std::iter::once(t.p0).chain(t.tau.iter().copied()).chain(t.pi.iter().copied()).map(|v| v.to_string()).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.truth.csv` into `dir`.
pub fn save(dataset: &Dataset, truths: &[SyntheticTruth], dir: &Path, stem: &str) -> Result<(), SyntheticError> {
    crate::data::save_csv(dataset, dir.join(format!("{stem}.csv")))?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.truth.csv")))?);
    write_truth_csv(truths, f)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_se(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    /// Difference in mean response between treated and control with its standard error.
    fn empirical_uplift(rows: &[&Instance]) -> (f64, f64) {
        let t: Vec<f64> = rows.iter().filter(|r| !r.is_control()).map(|r| r.y).collect();
        let c: Vec<f64> = rows.iter().filter(|r| r.is_control()).map(|r| r.y).collect();
        let (mt, st) = mean_se(&t);
        let (mc, sc) = mean_se(&c);
        (mt - mc, (st * st + sc * sc).sqrt())
    }

    #[test]
    fn zero_effect_config_has_zero_truth_and_no_empirical_uplift() {
        let cfg = GeneratorConfig::linear_rct(4, 1, 20_000, 1, 2).zero_effect();
        let (ds, truths) = generate(&cfg).unwrap();
        assert!(truths.iter().all(|t| t.tau.iter().all(|v| *v == 0.0)));
        let rows: Vec<&Instance> = ds.rows.iter().collect();
        let (u, se) = empirical_uplift(&rows);
        assert!(u.abs() < 3.0 * se, "uplift {u} se {se}");
    }

    #[test]
    fn rct_treated_fraction_concentrates() {
        // binomial sd at n=100k is 0.00158; 0.005 is > 3 sd
        let cfg = GeneratorConfig::linear_rct(3, 1, 100_000, 4, 9);
        let (ds, _) = generate(&cfg).unwrap();
        let frac = ds.rows.iter().filter(|r| !r.is_control()).count() as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() < 0.005, "{frac}");
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GeneratorConfig::linear_rct(3, 2, 500, 4, 9);
        let (a, ta) = generate(&cfg).unwrap();
        let (b, tb) = generate(&cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        crate::data::write_csv(&a, &mut ba).unwrap();
        crate::data::write_csv(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(ta, tb);
    }

    #[test]
    fn truths_respect_probability_bounds() {
        let mut cfg = GeneratorConfig::linear_rct(5, 3, 5_000, 8, 1).confounded(1.0);
        cfg.max_effect = 1.0;
        cfg.effects[0].interaction = 0.7;
        let (_, truths) = generate(&cfg).unwrap();
        for t in &truths {
            assert!((0.0..=1.0).contains(&t.p0));
            assert!(t.tau.iter().all(|tau| (0.0..=1.0).contains(&(t.p0 + tau))));
            assert!((t.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subgroup_uplift_matches_mean_true_effect() {
        let cfg = GeneratorConfig::linear_rct(4, 1, 100_000, 5, 6);
        let (ds, truths) = generate(&cfg).unwrap();
        for positive in [true, false] {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| (ds.rows[i].x[0] > 0.0) == positive).collect();
            let rows: Vec<&Instance> = idx.iter().map(|&i| &ds.rows[i]).collect();
            let (u, se) = empirical_uplift(&rows);
            let truth = idx.iter().map(|&i| truths[i].tau[0]).sum::<f64>() / idx.len() as f64;
            assert!((u - truth).abs() < 3.0 * se, "subgroup {positive}: {u} vs {truth} (se {se})");
        }
    }

    #[test]
    fn confounded_policy_shifts_feature_distribution() {
        let cfg = GeneratorConfig::linear_rct(4, 1, 100_000, 5, 6).confounded(1.0);
        let (ds, _) = generate(&cfg).unwrap();
        let t: Vec<f64> = ds.rows.iter().filter(|r| !r.is_control()).map(|r| r.x[0]).collect();
        let c: Vec<f64> = ds.rows.iter().filter(|r| r.is_control()).map(|r| r.x[0]).collect();
        let (mt, st) = mean_se(&t);
        let (mc, sc) = mean_se(&c);
        let z = (mt - mc) / (st * st + sc * sc).sqrt();
        assert!(z > 5.0, "z = {z}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = GeneratorConfig::linear_rct(3, 1, 10, 0, 0);
        cfg.max_effect = 1.5;
        assert!(matches!(generate(&cfg), Err(SyntheticError::EffectRange(_))));
        let mut cfg = GeneratorConfig::linear_rct(3, 1, 10, 0, 0);
        cfg.assignment = Assignment::Rct { probabilities: vec![0.7, 0.7] };
        assert!(matches!(generate(&cfg), Err(SyntheticError::Config(_))));
    }

    #[test]
    fn treatment_features_carry_index_and_amount() {
        let cfg = GeneratorConfig::linear_rct(2, 3, 200, 0, 0);
        let (ds, _) = generate(&cfg).unwrap();
        for r in &ds.rows {
            assert_eq!(r.t[1], r.t[0] * cfg.amount_step);
        }
        assert_eq!(ds.declarations.t[0].cardinality, Some(4));
    }
}
