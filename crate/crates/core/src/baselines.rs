//! Meta-learner baselines over the same encoder and MLP stack as EFIN.
//!
//! The S-Learner feeds treatment embeddings to one response MLP alongside the
//! other features. The T-Learner fits one encoder and MLP per group (control
//! plus each treatment) with no sharing, each on its own group's rows only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::efin::{EfinConfig, LossWeights};
use crate::encoder::{EncoderOptions, EncoderParams, FeatureSchema, PreparedBatch, TreatmentCatalog};
use crate::mlp::Mlp;
use crate::model::{l2_penalty, sum_terms, ModelError, ModelKind, UpliftModel, SCORE_CHUNK};
use crate::tensor::{Graph, ParamStore, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub rank: usize,
    /// Hidden widths of the response MLP; `None` means one layer of
    /// `d_x * rank / 2`, the EFIN natural-response default.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub shared_continuous: bool,
    #[serde(default = "one")]
    pub encoder_init_scale: f64,
    #[serde(default)]
    pub loss: LossWeights,
    /// T-Learner only: give every group head the same initial values.
    #[serde(default)]
    pub identical_init: bool,
}

fn one() -> f64 {
    1.0
}

impl From<&EfinConfig> for BaselineConfig {
    fn from(c: &EfinConfig) -> Self {
        BaselineConfig {
            rank: c.rank,
            hidden: c.natural_hidden.clone(),
            shared_continuous: c.shared_continuous,
            encoder_init_scale: c.encoder_init_scale,
            loss: c.loss,
            identical_init: false,
        }
    }
}

impl BaselineConfig {
    fn hidden_for(&self, d_x: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![(d_x * self.rank / 2).max(1)])
    }

    fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions { dim: self.rank, shared_continuous: self.shared_continuous, init_scale: self.encoder_init_scale }
    }

    fn regularizer(&self, g: &mut Graph, store: &ParamStore) -> Result<Option<Var>, TensorError> {
        if self.loss.l2_in_loss && self.loss.lambda != 0.0 {
            Ok(Some(l2_penalty(g, store, self.loss.lambda)?))
        } else {
            Ok(None)
        }
    }
}

fn check(schema: &FeatureSchema, catalog: &TreatmentCatalog, config: &BaselineConfig) -> Result<(), ModelError> {
    schema.validate()?;
    if config.rank == 0 {
        return Err(ModelError::Config("rank must be positive".into()));
    }
    if catalog.treatments() != schema.treatments() {
        return Err(ModelError::Config(format!(
            "catalog has {} treatments, schema has {}",
            catalog.treatments(),
            schema.treatments()
        )));
    }
    Ok(())
}

fn flatten(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
    let s = g.shape(v).to_vec();
    g.reshape(v, &[s[0], s[1] * s[2]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SLearnerParams {
    pub encoder: EncoderParams,
    /// Response MLP over `concat(e_x, e_t)`.
    pub response: Mlp,
}

pub struct SLearner {
    pub config: BaselineConfig,
    schema: FeatureSchema,
    catalog: TreatmentCatalog,
    store: ParamStore,
    pub params: SLearnerParams,
}

impl SLearner {
    pub fn new(schema: FeatureSchema, catalog: TreatmentCatalog, config: BaselineConfig, seed: u64) -> Result<Self, ModelError> {
        check(&schema, &catalog, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&schema, config.encoder_options(), true, &mut store, "encoder", &mut rng);
        let input = (schema.d_x() + schema.d_t()) * config.rank;
        let response = Mlp::init(&mut store, "response", input, &config.hidden_for(schema.d_x()), 1, &mut rng);
        Ok(SLearner { config, schema, catalog, store, params: SLearnerParams { encoder, response } })
    }

    pub fn from_parts(
        schema: FeatureSchema,
        catalog: TreatmentCatalog,
        config: BaselineConfig,
        store: ParamStore,
        params: SLearnerParams,
    ) -> Self {
        SLearner { config, schema, catalog, store, params }
    }

    /// Response logits `[B]`.
    pub fn response_logits(&self, g: &mut Graph, batch: &PreparedBatch) -> Result<Var, ModelError> {
        let ex = self.params.encoder.encode_x(g, &self.store, batch)?;
        let et = self.params.encoder.encode_t(g, &self.store, batch)?;
        let joined = g.concat(&[ex, et], 1)?;
        let flat = flatten(g, joined)?;
        let logit = self.params.response.forward(g, &self.store, flat)?;
        Ok(g.reshape(logit, &[batch.len])?)
    }

    fn logits_with(&self, rows: &[&Instance], descriptor: &[f64]) -> Result<Vec<f64>, ModelError> {
        let batch = self.schema.prepare_batch(rows, Some(descriptor))?;
        let mut g = Graph::new();
        let out = self.response_logits(&mut g, &batch)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl UpliftModel for SLearner {
    fn kind(&self) -> ModelKind {
        ModelKind::SLearner
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn catalog(&self) -> &TreatmentCatalog {
        &self.catalog
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn training_loss(&self, g: &mut Graph, batch: &PreparedBatch) -> Result<Var, ModelError> {
        let logits = self.response_logits(g, batch)?;
        let w = vec![1.0 / batch.len.max(1) as f64; batch.len];
        let mut terms = vec![g.bce_with_logits(logits, &batch.y, &w)?];
        terms.extend(self.config.regularizer(g, &self.store)?);
        Ok(sum_terms(g, &terms)?)
    }

    /// Logit with treatment `k`'s features minus logit with control features.
    fn score_rows(&self, rows: &[&Instance], k: usize) -> Result<Vec<f64>, ModelError> {
        let treated = self.catalog.treatment(k)?.to_vec();
        let control = self.catalog.control().to_vec();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let a = self.logits_with(chunk, &treated)?;
            let b = self.logits_with(chunk, &control)?;
            out.extend(a.iter().zip(&b).map(|(a, b)| a - b));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHead {
    pub encoder: EncoderParams,
    pub response: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TLearnerParams {
    /// Index `g` is the head of group `g` (0 = control).
    pub heads: Vec<GroupHead>,
}

pub struct TLearner {
    pub config: BaselineConfig,
    schema: FeatureSchema,
    catalog: TreatmentCatalog,
    store: ParamStore,
    pub params: TLearnerParams,
}

impl TLearner {
    pub fn new(schema: FeatureSchema, catalog: TreatmentCatalog, config: BaselineConfig, seed: u64) -> Result<Self, ModelError> {
        check(&schema, &catalog, &config)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_for(schema.d_x());
        let heads = (0..=schema.treatments())
            .map(|gi| {
                if config.identical_init {
                    rng = ChaCha8Rng::seed_from_u64(seed);
                }
                let prefix = format!("head{gi}");
                let encoder =
                    EncoderParams::init(&schema, config.encoder_options(), false, &mut store, &format!("{prefix}.encoder"), &mut rng);
                let response =
                    Mlp::init(&mut store, &format!("{prefix}.response"), schema.d_x() * config.rank, &hidden, 1, &mut rng);
                GroupHead { encoder, response }
            })
            .collect();
        Ok(TLearner { config, schema, catalog, store, params: TLearnerParams { heads } })
    }

    pub fn from_parts(
        schema: FeatureSchema,
        catalog: TreatmentCatalog,
        config: BaselineConfig,
        store: ParamStore,
        params: TLearnerParams,
    ) -> Self {
        TLearner { config, schema, catalog, store, params }
    }

    pub fn heads(&self) -> usize {
        self.params.heads.len()
    }

    /// Response logits `[B]` of head `group`.
    pub fn head_logits(&self, g: &mut Graph, batch: &PreparedBatch, group: usize) -> Result<Var, ModelError> {
        let head = self.params.heads.get(group).ok_or(ModelError::InvalidLabel { label: group, treatments: self.treatments() })?;
        let ex = head.encoder.encode_x(g, &self.store, batch)?;
        let flat = flatten(g, ex)?;
        let logit = head.response.forward(g, &self.store, flat)?;
        Ok(g.reshape(logit, &[batch.len])?)
    }
}

impl UpliftModel for TLearner {
    fn kind(&self) -> ModelKind {
        ModelKind::TLearner
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn catalog(&self) -> &TreatmentCatalog {
        &self.catalog
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sum over groups present in the batch of each head's mean BCE on its
    /// own rows.
    fn training_loss(&self, g: &mut Graph, batch: &PreparedBatch) -> Result<Var, ModelError> {
        let mut terms = Vec::new();
        for group in 0..self.heads() {
            let idx: Vec<usize> = (0..batch.len).filter(|&i| batch.groups[i] == group).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = batch.select(&idx);
            let logits = self.head_logits(g, &sub, group)?;
            let w = vec![1.0 / idx.len() as f64; idx.len()];
            terms.push(g.bce_with_logits(logits, &sub.y, &w)?);
        }
        terms.extend(self.config.regularizer(g, &self.store)?);
        Ok(sum_terms(g, &terms)?)
    }

    /// Head-`k` logit minus head-0 logit.
    fn score_rows(&self, rows: &[&Instance], k: usize) -> Result<Vec<f64>, ModelError> {
        self.catalog.treatment(k)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let batch = self.schema.prepare_batch(chunk, None)?;
            let mut g = Graph::new();
            let a = self.head_logits(&mut g, &batch, k)?;
            let b = self.head_logits(&mut g, &batch, 0)?;
            out.extend(g.value(a).data().iter().zip(g.value(b).data()).map(|(a, b)| a - b));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FeatureSpec;
    use crate::tensor::Gradients;
    use rand::Rng;

    fn schema(treatments: usize) -> FeatureSchema {
        FeatureSchema::new(
            vec![FeatureSpec::continuous("a", 0.0, 1.0), FeatureSpec::sparse("b", 3), FeatureSpec::continuous("c", 0.0, 1.0)],
            vec![FeatureSpec::sparse("treatment", treatments + 1)],
        )
        .unwrap()
    }

    fn catalog(treatments: usize) -> TreatmentCatalog {
        TreatmentCatalog::new((0..=treatments).map(|k| vec![k as f64]).collect())
    }

    fn rows(n: usize, treatments: usize) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|i| Instance {
                x: vec![rng.random_range(-1.0..1.0), rng.random_range(0..3) as f64, rng.random_range(-1.0..1.0)],
                t: vec![(i % (treatments + 1)) as f64],
                y: (i % 3 == 0) as u8 as f64,
            })
            .collect()
    }

    fn config() -> BaselineConfig {
        BaselineConfig::from(&EfinConfig::new(4))
    }

    #[test]
    fn slearner_identical_treatment_embedding_scores_zero() {
        let mut m = SLearner::new(schema(1), catalog(1), config(), 2).unwrap();
        let crate::encoder::FeatureParams::Lookup { table } = m.params.encoder.t[0].clone() else { panic!() };
        let t = m.store.get_mut(table);
        let row0 = t.data()[..4].to_vec();
        t.data_mut()[4..8].copy_from_slice(&row0);
        let data = rows(9, 1);
        let refs: Vec<&Instance> = data.iter().collect();
        assert!(m.score_rows(&refs, 1).unwrap().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn slearner_scores_are_deterministic_and_reject_unknown_k() {
        let m = SLearner::new(schema(2), catalog(2), config(), 2).unwrap();
        let data = rows(7, 2);
        let refs: Vec<&Instance> = data.iter().collect();
        assert_eq!(m.score_rows(&refs, 2).unwrap(), m.score_rows(&refs, 2).unwrap());
        assert!(m.score_rows(&refs, 3).is_err());
        assert!(m.infer_uplift(&data[0], 0).is_err());
    }

    #[test]
    fn tlearner_identical_heads_score_zero() {
        let mut cfg = config();
        cfg.identical_init = true;
        let m = TLearner::new(schema(2), catalog(2), cfg, 9).unwrap();
        let data = rows(8, 2);
        let refs: Vec<&Instance> = data.iter().collect();
        for k in 1..=2 {
            assert!(m.score_rows(&refs, k).unwrap().iter().all(|s| *s == 0.0));
        }
        let m = TLearner::new(schema(2), catalog(2), config(), 9).unwrap();
        assert!(m.score_rows(&refs, 1).unwrap().iter().any(|s| *s != 0.0));
    }

    #[test]
    fn tlearner_k7_has_eight_heads_without_sharing() {
        let m = TLearner::new(schema(7), catalog(7), config(), 1).unwrap();
        assert_eq!(m.heads(), 8);
        let per_head = m.store.len() / 8;
        assert_eq!(per_head * 8, m.store.len());
        for (gi, h) in m.params.heads.iter().enumerate() {
            assert!(m.store.name(h.response.layers[0].weight).starts_with(&format!("head{gi}.")));
        }
    }

    #[test]
    fn tlearner_head_gradient_ignores_other_groups() {
        let mut cfg = config();
        cfg.loss.lambda = 0.0;
        let m = TLearner::new(schema(2), catalog(2), cfg, 4).unwrap();
        let data: Vec<Instance> = rows(12, 2).into_iter().filter(|r| r.t[0] != 1.0).collect();
        let refs: Vec<&Instance> = data.iter().collect();
        let batch = m.schema.prepare_batch(&refs, None).unwrap();
        let mut g = Graph::new();
        let loss = m.training_loss(&mut g, &batch).unwrap();
        let mut grads = Gradients::for_store(&m.store);
        g.backward(loss, &mut grads).unwrap();
        for id in m.store.ids() {
            let name = m.store.name(id);
            let zero = grads.get(id).is_none_or(|t| t.data().iter().all(|v| *v == 0.0));
            assert_eq!(zero, name.starts_with("head1."), "{name}");
        }
    }

    #[test]
    fn slearner_loss_is_mean_bce() {
        let mut cfg = config();
        cfg.loss.lambda = 0.0;
        let m = SLearner::new(schema(1), catalog(1), cfg, 5).unwrap();
        let data = rows(6, 1);
        let refs: Vec<&Instance> = data.iter().collect();
        let batch = m.schema.prepare_batch(&refs, None).unwrap();
        let mut g = Graph::new();
        let logits = m.response_logits(&mut g, &batch).unwrap();
        let z = g.value(logits).data().to_vec();
        let loss = m.training_loss(&mut g, &batch).unwrap();
        let expected: f64 = z
            .iter()
            .zip(&batch.y)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }
}
