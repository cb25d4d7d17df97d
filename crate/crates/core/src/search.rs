//! Hyper-parameter grid over rank, batch size, learning rate and lambda.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{FeatureSchema, TreatmentCatalog};
use crate::metrics;
use crate::model::{AnyModel, ModelSpec, UpliftModel};
use crate::train::{score_binary, train, TrainConfig, TrainError, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub rank: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Grid {
    /// The full tuning grid: 3 ranks, 4 batch sizes, 4 learning rates and
    /// 5 regularization strengths.
    pub fn standard() -> Self {
        Grid {
            rank: vec![32, 64, 128],
            batch_size: vec![256, 512, 1024, 2048],
            learning_rate: vec![1e-4, 1e-3, 1e-2, 1e-1],
            lambda: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
        }
    }

    pub fn len(&self) -> usize {
        self.rank.len() * self.batch_size.len() * self.learning_rate.len() * self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trial `i` in config order (rank outermost, lambda innermost).
    pub fn trial(&self, i: usize) -> Trial {
        let l = i % self.lambda.len();
        let r = i / self.lambda.len();
        let lr = r % self.learning_rate.len();
        let r = r / self.learning_rate.len();
        let bs = r % self.batch_size.len();
        let rank = r / self.batch_size.len();
        Trial {
            index: i,
            rank: self.rank[rank],
            batch_size: self.batch_size[bs],
            learning_rate: self.learning_rate[lr],
            lambda: self.lambda[l],
        }
    }

    pub fn trials(&self) -> Vec<Trial> {
        (0..self.len()).map(|i| self.trial(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub rank: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
}

impl Trial {
    pub fn apply(&self, spec: &ModelSpec, cfg: &TrainConfig) -> (ModelSpec, TrainConfig) {
        let spec = ModelSpec { rank: self.rank, ..spec.clone() };
        let cfg = TrainConfig { batch_size: self.batch_size, learning_rate: self.learning_rate, lambda: self.lambda, ..cfg.clone() };
        (spec, cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Traversal {
    #[default]
    Exhaustive,
    /// `budget` distinct trials drawn uniformly with `seed`, run in config order.
    Random { budget: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "Grid::standard")]
    pub grid: Grid,
    #[serde(default)]
    pub traversal: Traversal,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { grid: Grid::standard(), traversal: Traversal::Exhaustive }
    }
}

impl SearchConfig {
    pub fn selected(&self) -> Vec<Trial> {
        let n = self.grid.len();
        match self.traversal {
            Traversal::Exhaustive => self.grid.trials(),
            Traversal::Random { budget, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = rand::seq::index::sample(&mut rng, n, budget.min(n)).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| self.grid.trial(i)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrialStatus {
    Completed { validation_qini: f64, validation_auuc: f64, best_epoch: usize, epochs: usize },
    Diverged { detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub trial: Trial,
    #[serde(flatten)]
    pub status: TrialStatus,
}

pub struct SearchOutcome {
    pub best: Trial,
    pub best_spec: ModelSpec,
    pub best_config: TrainConfig,
    pub best_outcome: TrainOutcome,
    pub model: AnyModel,
    pub leaderboard: Vec<LeaderboardEntry>,
}

fn mean_auuc(model: &AnyModel, data: &Dataset) -> Result<f64, TrainError> {
    let mut values = Vec::new();
    for k in 1..=model.treatments() {
        values.push(metrics::auuc(&score_binary(model, data, k)?)?.1);
    }
    Ok(metrics::multi_treatment_average(&values)?)
}

/// Trains one model per selected trial and keeps the best by validation
/// QINI, then AUUC, then config order. Entries are appended to
/// `leaderboard` as JSON lines when a path is given.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    spec: &ModelSpec,
    base: &TrainConfig,
    search: &SearchConfig,
    schema: &FeatureSchema,
    catalog: &TreatmentCatalog,
    train_set: &Dataset,
    validation: &Dataset,
    model_seed: u64,
    leaderboard: Option<&Path>,
) -> Result<SearchOutcome, TrainError> {
    let trials = search.selected();
    if trials.is_empty() {
        return Err(TrainError::Config("search grid is empty".into()));
    }
    let mut sink = match leaderboard {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| TrainError::Config(format!("cannot open leaderboard {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut board = Vec::with_capacity(trials.len());
    let mut best: Option<(f64, f64, SearchOutcome)> = None;
    for trial in &trials {
        let (s, c) = trial.apply(spec, base);
        let mut model = s.build(schema.clone(), catalog.clone(), c.loss_weights(), model_seed)?;
        let status = match train(&mut model, train_set, validation, &c) {
            Ok(outcome) => {
                let q = outcome.best_validation_qini;
                let a = mean_auuc(&model, validation)?;
                let status = TrialStatus::Completed {
                    validation_qini: q,
                    validation_auuc: a,
                    best_epoch: outcome.best_epoch,
                    epochs: outcome.epochs.len(),
                };
                let better = match &best {
                    None => true,
                    Some((bq, ba, _)) => q > *bq || (q == *bq && a > *ba),
                };
                if better {
                    let o = SearchOutcome {
                        best: *trial,
                        best_spec: s,
                        best_config: c,
                        best_outcome: outcome,
                        model,
                        leaderboard: Vec::new(),
                    };
                    best = Some((q, a, o));
                }
                status
            }
            Err(TrainError::Divergence { epoch, step, detail }) => {
                TrialStatus::Diverged { detail: format!("epoch {epoch}, step {step}: {detail}") }
            }
            Err(e) => return Err(e),
        };
        let entry = LeaderboardEntry { trial: *trial, status };
        if let Some(f) = sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(f, "{line}").map_err(|e| TrainError::Config(format!("cannot write leaderboard: {e}")))?;
        }
        board.push(entry);
    }
    let (_, _, mut outcome) = best.ok_or(TrainError::AllTrialsDiverged(trials.len()))?;
    outcome.leaderboard = board;
    Ok(outcome)
}
