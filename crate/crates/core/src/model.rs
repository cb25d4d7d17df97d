//! Behaviour shared by every trainable uplift model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BaselineConfig, SLearner, TLearner};
use crate::data::Instance;
use crate::efin::{Efin, EfinConfig, LossWeights, ModuleSwitches};
use crate::encoder::{EncoderError, FeatureSchema, PreparedBatch, TreatmentCatalog};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("group label {label} out of range for {treatments} treatments")]
    InvalidLabel { label: usize, treatments: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Efin,
    SLearner,
    TLearner,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Efin => "efin",
            ModelKind::SLearner => "slearner",
            ModelKind::TLearner => "tlearner",
        })
    }
}

/// Rows scored per tape during inference.
pub(crate) const SCORE_CHUNK: usize = 2048;

pub trait UpliftModel {
    fn kind(&self) -> ModelKind;
    fn schema(&self) -> &FeatureSchema;
    fn catalog(&self) -> &TreatmentCatalog;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Scalar training objective for one batch, recorded on `graph`.
    fn training_loss(&self, graph: &mut Graph, batch: &PreparedBatch) -> Result<Var, ModelError>;

    /// Predicted uplift of treatment `k` for each row.
    fn score_rows(&self, rows: &[&Instance], k: usize) -> Result<Vec<f64>, ModelError>;

    fn treatments(&self) -> usize {
        self.schema().treatments()
    }

    fn infer_uplift(&self, instance: &Instance, k: usize) -> Result<f64, ModelError> {
        Ok(self.score_rows(&[instance], k)?[0])
    }
}

fn default_rank() -> usize {
    32
}

fn one() -> f64 {
    1.0
}

/// Architecture choices for any model kind. Options that do not apply to a
/// kind are ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    /// Embedding width `K_d`.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Hidden widths of the response MLP; `None` means `[d_x * rank / 2]`.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub shared_continuous: bool,
    #[serde(default = "one")]
    pub encoder_init_scale: f64,
    #[serde(default)]
    pub modules: ModuleSwitches,
    #[serde(default = "one")]
    pub constraint_weight: f64,
}

fn default_kind() -> ModelKind {
    ModelKind::Efin
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Efin,
            rank: default_rank(),
            hidden: None,
            shared_continuous: false,
            encoder_init_scale: 1.0,
            modules: ModuleSwitches::default(),
            constraint_weight: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn efin_config(&self, loss: LossWeights) -> EfinConfig {
        EfinConfig {
            rank: self.rank,
            natural_hidden: self.hidden.clone(),
            shared_continuous: self.shared_continuous,
            encoder_init_scale: self.encoder_init_scale,
            modules: self.modules,
            loss: LossWeights { constraint_weight: self.constraint_weight, ..loss },
        }
    }

    pub fn build(
        &self,
        schema: FeatureSchema,
        catalog: TreatmentCatalog,
        loss: LossWeights,
        seed: u64,
    ) -> Result<AnyModel, ModelError> {
        let efin = self.efin_config(loss);
        Ok(match self.kind {
            ModelKind::Efin => AnyModel::Efin(Efin::new(schema, catalog, efin, seed)?),
            ModelKind::SLearner => AnyModel::SLearner(SLearner::new(schema, catalog, BaselineConfig::from(&efin), seed)?),
            ModelKind::TLearner => AnyModel::TLearner(TLearner::new(schema, catalog, BaselineConfig::from(&efin), seed)?),
        })
    }
}

/// Any of the supported models behind one type.
pub enum AnyModel {
    Efin(Efin),
    SLearner(SLearner),
    TLearner(TLearner),
}

impl AnyModel {
    pub fn as_efin(&self) -> Option<&Efin> {
        match self {
            AnyModel::Efin(m) => Some(m),
            _ => None,
        }
    }

    fn inner(&self) -> &dyn UpliftModel {
        match self {
            AnyModel::Efin(m) => m,
            AnyModel::SLearner(m) => m,
            AnyModel::TLearner(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn UpliftModel {
        match self {
            AnyModel::Efin(m) => m,
            AnyModel::SLearner(m) => m,
            AnyModel::TLearner(m) => m,
        }
    }
}

impl UpliftModel for AnyModel {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn schema(&self) -> &FeatureSchema {
        self.inner().schema()
    }

    fn catalog(&self) -> &TreatmentCatalog {
        self.inner().catalog()
    }

    fn store(&self) -> &ParamStore {
        self.inner().store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().store_mut()
    }

    fn training_loss(&self, graph: &mut Graph, batch: &PreparedBatch) -> Result<Var, ModelError> {
        self.inner().training_loss(graph, batch)
    }

    fn score_rows(&self, rows: &[&Instance], k: usize) -> Result<Vec<f64>, ModelError> {
        self.inner().score_rows(rows, k)
    }
}

/// `lambda * sum(theta^2)` over every parameter in `store`.
pub(crate) fn l2_penalty(g: &mut Graph, store: &ParamStore, lambda: f64) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(store.len());
    for id in store.ids() {
        let p = g.param(store, id)?;
        parts.push(g.sum_squares(p)?);
    }
    let total = sum_terms(g, &parts)?;
    g.scale(total, lambda)
}

/// Sum of scalar vars; zero when `terms` is empty.
pub(crate) fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var, TensorError> {
    match terms {
        [] => g.constant(Tensor::scalar(0.0)),
        [one] => Ok(*one),
        _ => {
            let stacked = g.concat(terms, 0)?;
            g.sum(stacked)
        }
    }
}

/// `1 - t0` for binary treatment; the complemented one-hot of length `K + 1`
/// otherwise.
pub fn invert_group_label(t0: usize, treatments: usize) -> Result<Vec<f64>, ModelError> {
    if treatments == 0 || t0 > treatments {
        return Err(ModelError::InvalidLabel { label: t0, treatments });
    }
    if treatments == 1 {
        return Ok(vec![1.0 - t0 as f64]);
    }
    Ok((0..=treatments).map(|g| if g == t0 { 0.0 } else { 1.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverted_labels() {
        assert_eq!(invert_group_label(1, 1).unwrap(), vec![0.0]);
        assert_eq!(invert_group_label(0, 1).unwrap(), vec![1.0]);
        assert_eq!(invert_group_label(2, 3).unwrap(), vec![1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(invert_group_label(4, 3), Err(ModelError::InvalidLabel { .. })));
    }
}
