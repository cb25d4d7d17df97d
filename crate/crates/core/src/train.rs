//! Minibatch training with AdamW and early stopping on validation QINI.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Instance};
use crate::efin::LossWeights;
use crate::encoder::EncoderError;
use crate::metrics::{self, binary_records, MetricError, MetricOptions, MetricSummary, ScoredRecord};
use crate::model::{ModelError, UpliftModel};
use crate::search::SearchConfig;
use crate::tensor::{Gradients, Graph, ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("all {0} trials diverged")]
    AllTrialsDiverged(usize),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        TrainError::Model(ModelError::Encoder(e))
    }
}

fn non_finite(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Tensor(TensorError::NonFinite { .. }) | ModelError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. }))
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// L2 strength.
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// Put `lambda * sum(theta^2)` in the loss; otherwise apply `lambda` as
    /// decoupled weight decay in the optimizer.
    #[serde(default = "defaults::yes")]
    pub l2_in_loss: bool,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    /// Share of the training rows held out for early stopping.
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Tune over a grid before the final fit (used by the experiment layer).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
}

mod defaults {
    pub fn batch_size() -> usize {
        256
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn lambda() -> f64 {
        1e-4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn max_epochs() -> usize {
        20
    }
    pub fn patience() -> usize {
        5
    }
    pub fn validation_fraction() -> f64 {
        0.1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lambda: defaults::lambda(),
            l2_in_loss: true,
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            validation_fraction: defaults::validation_fraction(),
            seed: 0,
            search: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Loss weights handed to the model.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, constraint_weight: 1.0, l2_in_loss: self.l2_in_loss }
    }

    fn weight_decay(&self) -> f64 {
        if self.l2_in_loss {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Adam with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + self.weight_decay * theta[i];
                theta[i] -= self.lr * update;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = match self.best {
            None => !value.is_nan(),
            Some((_, b)) => value > b,
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience.max(1) }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch objectives, weighted by batch size.
    pub train_loss: f64,
    pub validation_qini: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_qini: f64,
    pub stopped_early: bool,
}

/// Scores the control rows and the group-`k` rows of `data` for treatment `k`.
pub fn score_binary<M: UpliftModel + ?Sized>(model: &M, data: &Dataset, k: usize) -> Result<Vec<ScoredRecord>, ModelError> {
    let rows: Vec<&Instance> = data.rows.iter().filter(|r| r.group() == 0 || r.group() == k).collect();
    let scores = model.score_rows(&rows, k)?;
    let groups: Vec<usize> = rows.iter().map(|r| r.group()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    Ok(binary_records(&groups, &ys, &scores, k))
}

/// Normalized QINI averaged over treatments `1..=K`.
pub fn mean_qini<M: UpliftModel + ?Sized>(model: &M, data: &Dataset) -> Result<f64, TrainError> {
    let mut values = Vec::with_capacity(model.treatments());
    for k in 1..=model.treatments() {
        values.push(metrics::qini(&score_binary(model, data, k)?)?.1);
    }
    Ok(metrics::multi_treatment_average(&values)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Entry `k - 1` belongs to treatment `k`.
    pub per_treatment: Vec<MetricSummary>,
    pub average: MetricSummary,
}

/// LIFT@h, QINI, AUUC and WAU per treatment and averaged.
pub fn evaluate<M: UpliftModel + ?Sized>(model: &M, data: &Dataset, opts: &MetricOptions) -> Result<Evaluation, TrainError> {
    let mut per_treatment = Vec::with_capacity(model.treatments());
    for k in 1..=model.treatments() {
        per_treatment.push(metrics::summarize(&score_binary(model, data, k)?, opts)?);
    }
    let average = metrics::summarize_multi(&per_treatment)?;
    Ok(Evaluation { per_treatment, average })
}

/// Trains in place and leaves the best-validation-QINI parameters in `model`.
pub fn train<M: UpliftModel + ?Sized>(
    model: &mut M,
    train_set: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    for row in train_set.rows.iter().chain(&validation.rows) {
        model.schema().check_instance(row)?;
    }
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Gradients::for_store(model.store());
    let mut best_store = model.store().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&Instance> = idx.iter().map(|&i| &train_set.rows[i]).collect();
            let batch = model.schema().prepare_batch(&rows, None)?;
            let mut g = Graph::new();
            let diverged = |detail: String| TrainError::Divergence { epoch, step: step + 1, detail };
            let loss = match model.training_loss(&mut g, &batch) {
                Ok(l) => l,
                Err(e) if non_finite(&e) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            let value = g.value(loss).item().map_err(ModelError::from)?;
            if !value.is_finite() {
                return Err(diverged(format!("loss {value}")));
            }
            grads.clear();
            g.backward(loss, &mut grads).map_err(|e| diverged(e.to_string()))?;
            opt.step(model.store_mut(), &grads);
            if !model.store().iter().all(|(_, _, t)| t.is_finite()) {
                return Err(diverged("non-finite parameter after update".into()));
            }
            loss_sum += value * rows.len() as f64;
            seen += rows.len();
        }
        let validation_qini = mean_qini(model, validation)?;
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / seen as f64, validation_qini });
        let decision = stopper.observe(epoch, validation_qini);
        if decision.improved {
            best_store = model.store().clone();
        }
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    *model.store_mut() = best_store;
    let (best_epoch, best_validation_qini) = stopper.best().unwrap_or((0, f64::NAN));
    Ok(TrainOutcome { epochs, best_epoch, best_validation_qini, stopped_early })
}
