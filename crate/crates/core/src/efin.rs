//! Explicit feature-interaction uplift network.
//!
//! Four parts share one feature encoder:
//!
//! * **self-interaction**: scaled dot-product self-attention over the
//!   non-treatment feature tokens followed by an MLP, giving the natural
//!   response logit `y0`;
//! * **treatment-aware interaction**: one attention score per non-treatment
//!   feature, `w_t0 . relu(W_t1 e_t + W_t2 e_x_j + b_t2)`, softmaxed into
//!   `alpha`; `e_xt = sum_j alpha_j e_x_j` feeds the ITE head
//!   `tau = W_t3 e_xt + b_t3`, and the treated logit is `yk = y0 + tau`;
//! * **intervention constraint**: a group classifier on `e_xt` trained
//!   against inverted group labels;
//! * the composite loss `L_S + L_T + w_C * L_C + lambda * sum(theta^2)`.
//!
//! Composition happens in logit space; sigmoid is applied inside the losses
//! only. Ranking uses raw `tau`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::encoder::{EncoderOptions, EncoderParams, FeatureSchema, PreparedBatch, TreatmentCatalog};
use crate::mlp::{Dense, Mlp};
use crate::model::{invert_group_label, l2_penalty, sum_terms, ModelError, ModelKind, UpliftModel, SCORE_CHUNK};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSwitches {
    pub self_interaction: bool,
    pub treatment_aware: bool,
    pub intervention_constraint: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        ModuleSwitches { self_interaction: true, treatment_aware: true, intervention_constraint: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Coefficient of the L2 penalty.
    pub lambda: f64,
    /// Multiplier on the intervention-constraint loss.
    pub constraint_weight: f64,
    /// Add `lambda * sum(theta^2)` to the loss. When false the optimizer is
    /// expected to apply decoupled weight decay instead.
    pub l2_in_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1e-4, constraint_weight: 1.0, l2_in_loss: true }
    }
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfinConfig {
    /// Embedding width `K_d`.
    pub rank: usize,
    /// Hidden widths of the natural-response MLP; `None` means one layer of
    /// `d_x * rank / 2`. An empty list is a single affine map.
    #[serde(default)]
    pub natural_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub shared_continuous: bool,
    #[serde(default = "default_init_scale")]
    pub encoder_init_scale: f64,
    #[serde(default)]
    pub modules: ModuleSwitches,
    #[serde(default)]
    pub loss: LossWeights,
}

impl EfinConfig {
    pub fn new(rank: usize) -> Self {
        EfinConfig {
            rank,
            natural_hidden: None,
            shared_continuous: false,
            encoder_init_scale: 1.0,
            modules: ModuleSwitches::default(),
            loss: LossWeights::default(),
        }
    }

    pub fn hidden_for(&self, d_x: usize) -> Vec<usize> {
        self.natural_hidden.clone().unwrap_or_else(|| vec![(d_x * self.rank / 2).max(1)])
    }
}

/// Every learnable tensor of the network, as ids into the model's store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfinParams {
    pub encoder: EncoderParams,
    pub natural: Mlp,
    /// `[rank, 1]` scoring vector.
    pub w_t0: ParamId,
    /// `[d_t * rank, rank]`, applied to the concatenated treatment embeddings.
    pub w_t1: ParamId,
    /// `[rank, rank]`.
    pub w_t2: ParamId,
    pub b_t2: ParamId,
    pub ite: Dense,
    pub group: Dense,
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub natural: bool,
    pub group: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { natural: true, group: true };
    pub const UPLIFT_ONLY: Heads = Heads { natural: false, group: false };
}

/// Tape handles of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, d_x, rank]`
    pub ex: Var,
    /// `[B, d_t, rank]`
    pub et: Var,
    pub ebar: Option<Var>,
    /// `[B]`
    pub y0: Option<Var>,
    /// `[B, d_x]`
    pub alpha: Var,
    /// `[B, rank]`
    pub e_xt: Var,
    /// `[B]`
    pub tau: Var,
    pub yk: Option<Var>,
    /// `[B, G]`, `G = 1` for binary treatment and `K + 1` otherwise.
    pub group: Option<Var>,
}

/// Materialised per-instance outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub y0_logit: f64,
    pub tau_hat: f64,
    pub yk_logit: f64,
    pub group_logits: Vec<f64>,
    pub attention_alpha: Vec<f64>,
    pub e_xt: Vec<f64>,
    pub ebar_x: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub natural: Option<Var>,
    pub treated: Option<Var>,
    pub constraint: Option<Var>,
    pub regularizer: Option<Var>,
}

/// Scaled dot-product self-attention with `Q = K = V = ex` over axis 1 of
/// `ex: [B, d, r]`.
pub fn self_attend(g: &mut Graph, ex: Var) -> Result<Var, TensorError> {
    let shape = g.shape(ex).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(TensorError::Empty { op: "self_attend" });
    }
    let kt = g.transpose_last(ex)?;
    let scores = g.batch_matmul(ex, kt)?;
    let scaled = g.scale(scores, 1.0 / (shape[2] as f64).sqrt())?;
    let weights = g.softmax(scaled, 2)?;
    g.batch_matmul(weights, ex)
}

/// Self-attention of a single instance's feature tokens.
pub fn self_interaction(ex: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    if ex.is_empty() {
        return Err(ModelError::Tensor(TensorError::Empty { op: "self_interaction" }));
    }
    let mut g = Graph::new();
    let v = g.constant(tokens(ex)?)?;
    let out = self_attend(&mut g, v)?;
    Ok(split_rows(g.value(out).data(), ex[0].len()))
}

fn tokens(rows: &[Vec<f64>]) -> Result<Tensor, TensorError> {
    let r = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![1, rows.len(), r], rows.concat())
}

fn split_rows(data: &[f64], width: usize) -> Vec<Vec<f64>> {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

pub struct Efin {
    pub config: EfinConfig,
    schema: FeatureSchema,
    catalog: TreatmentCatalog,
    store: ParamStore,
    pub params: EfinParams,
}

impl Efin {
    pub fn new(schema: FeatureSchema, catalog: TreatmentCatalog, config: EfinConfig, seed: u64) -> Result<Self, ModelError> {
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
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let r = config.rank;
        let enc_opts = EncoderOptions { dim: r, shared_continuous: config.shared_continuous, init_scale: config.encoder_init_scale };
        let encoder = EncoderParams::init(&schema, enc_opts, true, &mut store, "encoder", &mut rng);
        let d_x = schema.d_x();
        let natural = Mlp::init(&mut store, "natural", d_x * r, &config.hidden_for(d_x), 1, &mut rng);
        let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
            crate::encoder::uniform_tensor(rng, shape, 1.0 / (fan_in as f64).sqrt())
        };
        let d_t = schema.d_t();
        // zero scoring vector: attention starts as mean pooling
        let w_t0 = store.add("treatment_attention.w_t0", Tensor::zeros(&[r, 1]));
        let w_t1 = store.add("treatment_attention.w_t1", uniform(&mut rng, &[d_t * r, r], d_t * r));
        let w_t2 = store.add("treatment_attention.w_t2", uniform(&mut rng, &[r, r], r));
        let b_t2 = store.add("treatment_attention.b_t2", uniform(&mut rng, &[r], r));
        let ite = Dense::init(&mut store, "ite", r, 1, &mut rng);
        let group_width = if schema.treatments() == 1 { 1 } else { schema.treatments() + 1 };
        let group = Dense::init(&mut store, "group", r, group_width, &mut rng);
        let params = EfinParams { encoder, natural, w_t0, w_t1, w_t2, b_t2, ite, group };
        Ok(Efin { config, schema, catalog, store, params })
    }

    /// Rebuilds a model around an existing parameter store (checkpoint load).
    pub fn from_parts(
        schema: FeatureSchema,
        catalog: TreatmentCatalog,
        config: EfinConfig,
        store: ParamStore,
        params: EfinParams,
    ) -> Self {
        Efin { config, schema, catalog, store, params }
    }

    pub fn group_width(&self) -> usize {
        self.store.get(self.params.group.bias).len()
    }

    /// Natural-response logit from self-attended tokens `[B, d_x, r]`.
    pub fn predict_natural_vars(&self, g: &mut Graph, ebar: Var) -> Result<Var, TensorError> {
        let s = g.shape(ebar).to_vec();
        let flat = g.reshape(ebar, &[s[0], s[1] * s[2]])?;
        let logit = self.params.natural.forward(g, &self.store, flat)?;
        g.reshape(logit, &[s[0]])
    }

    /// Returns `(alpha [B, d_x], e_xt [B, r])`.
    pub fn treatment_attention_vars(&self, g: &mut Graph, et: Var, ex: Var) -> Result<(Var, Var), TensorError> {
        let sx = g.shape(ex).to_vec();
        let st = g.shape(et).to_vec();
        let (b, d_x, r) = (sx[0], sx[1], sx[2]);
        let alpha = if self.config.modules.treatment_aware {
            let p = &self.params;
            let t_flat = g.reshape(et, &[b, st[1] * st[2]])?;
            let w_t1 = g.param(&self.store, p.w_t1)?;
            let t_proj = g.matmul(t_flat, w_t1)?;
            let t_proj = g.repeat(t_proj, 1, d_x)?;
            let x_flat = g.reshape(ex, &[b * d_x, r])?;
            let w_t2 = g.param(&self.store, p.w_t2)?;
            let b_t2 = g.param(&self.store, p.b_t2)?;
            let x_proj = g.matmul(x_flat, w_t2)?;
            let x_proj = g.add_bias(x_proj, b_t2)?;
            let x_proj = g.reshape(x_proj, &[b, d_x, r])?;
            let hidden = g.add(t_proj, x_proj)?;
            let hidden = g.relu(hidden)?;
            let hidden = g.reshape(hidden, &[b * d_x, r])?;
            let w_t0 = g.param(&self.store, p.w_t0)?;
            let scores = g.matmul(hidden, w_t0)?;
            let scores = g.reshape(scores, &[b, d_x])?;
            g.softmax(scores, 1)?
        } else {
            g.constant(Tensor::filled(&[b, d_x], 1.0 / d_x as f64))?
        };
        let weights = g.reshape(alpha, &[b, 1, d_x])?;
        let pooled = g.batch_matmul(weights, ex)?;
        let e_xt = g.reshape(pooled, &[b, r])?;
        Ok((alpha, e_xt))
    }

    /// Returns `(tau [B], yk [B])`; `yk` only when `y0` is supplied.
    pub fn predict_ite_and_response_vars(
        &self,
        g: &mut Graph,
        e_xt: Var,
        y0: Option<Var>,
    ) -> Result<(Var, Option<Var>), TensorError> {
        let b = g.shape(e_xt)[0];
        let tau = self.params.ite.forward(g, &self.store, e_xt)?;
        let tau = g.reshape(tau, &[b])?;
        let yk = y0.map(|y0| g.add(y0, tau)).transpose()?;
        Ok((tau, yk))
    }

    pub fn predict_group_vars(&self, g: &mut Graph, e_xt: Var) -> Result<Var, TensorError> {
        self.params.group.forward(g, &self.store, e_xt)
    }

    pub fn forward(&self, g: &mut Graph, batch: &PreparedBatch, heads: Heads) -> Result<ForwardVars, ModelError> {
        let enc = &self.params.encoder;
        let ex = enc.encode_x(g, &self.store, batch)?;
        let et = enc.encode_t(g, &self.store, batch)?;
        let (ebar, y0) = if heads.natural {
            let ebar = if self.config.modules.self_interaction { self_attend(g, ex)? } else { ex };
            (Some(ebar), Some(self.predict_natural_vars(g, ebar)?))
        } else {
            (None, None)
        };
        let (alpha, e_xt) = self.treatment_attention_vars(g, et, ex)?;
        let (tau, yk) = self.predict_ite_and_response_vars(g, e_xt, y0)?;
        let group = if heads.group { Some(self.predict_group_vars(g, e_xt)?) } else { None };
        Ok(ForwardVars { ex, et, ebar, y0, alpha, e_xt, tau, yk, group })
    }

    /// Per-instance view of a forward pass evaluated with [`Heads::ALL`].
    pub fn outputs(&self, g: &Graph, fw: &ForwardVars) -> Vec<ForwardOutputs> {
        let b = g.shape(fw.tau)[0];
        let d_x = g.shape(fw.alpha)[1];
        let r = g.shape(fw.e_xt)[1];
        let gw = fw.group.map_or(0, |v| g.shape(v)[1]);
        (0..b)
            .map(|i| ForwardOutputs {
                y0_logit: fw.y0.map_or(f64::NAN, |v| g.value(v).data()[i]),
                tau_hat: g.value(fw.tau).data()[i],
                yk_logit: fw.yk.map_or(f64::NAN, |v| g.value(v).data()[i]),
                group_logits: fw.group.map_or(Vec::new(), |v| g.value(v).data()[i * gw..(i + 1) * gw].to_vec()),
                attention_alpha: g.value(fw.alpha).data()[i * d_x..(i + 1) * d_x].to_vec(),
                e_xt: g.value(fw.e_xt).data()[i * r..(i + 1) * r].to_vec(),
                ebar_x: fw.ebar.map_or(Vec::new(), |v| split_rows(&g.value(v).data()[i * d_x * r..(i + 1) * d_x * r], r)),
            })
            .collect()
    }

    /// Composite objective. Supervised terms are means over their own
    /// instance counts; a term whose group is absent from the batch is omitted.
    pub fn loss(&self, g: &mut Graph, fw: &ForwardVars, batch: &PreparedBatch) -> Result<LossVars, ModelError> {
        let n = batch.len;
        let treatments = self.schema.treatments();
        let n_c = batch.groups.iter().filter(|&&t| t == 0).count();
        let n_t = n - n_c;
        let mut terms = Vec::new();

        let natural = match fw.y0 {
            Some(y0) if n_c > 0 => {
                let w: Vec<f64> = batch.groups.iter().map(|&t| if t == 0 { 1.0 / n_c as f64 } else { 0.0 }).collect();
                Some(g.bce_with_logits(y0, &batch.y, &w)?)
            }
            _ => None,
        };
        let treated = match fw.yk {
            Some(yk) if n_t > 0 => {
                let w: Vec<f64> = batch.groups.iter().map(|&t| if t > 0 { 1.0 / n_t as f64 } else { 0.0 }).collect();
                Some(g.bce_with_logits(yk, &batch.y, &w)?)
            }
            _ => None,
        };
        let cw = self.config.loss.constraint_weight;
        let constraint = match fw.group {
            Some(logits) if self.config.modules.intervention_constraint && cw != 0.0 && n > 0 => {
                let mut targets = Vec::with_capacity(n * self.group_width());
                for &t in &batch.groups {
                    targets.extend(invert_group_label(t, treatments)?);
                }
                let w = vec![cw / targets.len() as f64; targets.len()];
                Some(g.bce_with_logits(logits, &targets, &w)?)
            }
            _ => None,
        };
        let regularizer = if self.config.loss.l2_in_loss && self.config.loss.lambda != 0.0 {
            Some(l2_penalty(g, &self.store, self.config.loss.lambda)?)
        } else {
            None
        };
        terms.extend([natural, treated, constraint, regularizer].into_iter().flatten());
        let total = sum_terms(g, &terms)?;
        Ok(LossVars { total, natural, treated, constraint, regularizer })
    }

    fn heads_for_training(&self) -> Heads {
        Heads {
            natural: true,
            group: self.config.modules.intervention_constraint && self.config.loss.constraint_weight != 0.0,
        }
    }

    fn single_graph(&self, ex: &[Vec<f64>]) -> Result<(Graph, Var), ModelError> {
        let mut g = Graph::new();
        let v = g.constant(tokens(ex)?)?;
        Ok((g, v))
    }

    /// Natural-response logit for one instance's self-attended tokens.
    pub fn predict_natural(&self, ebar: &[Vec<f64>]) -> Result<f64, ModelError> {
        let (mut g, v) = self.single_graph(ebar)?;
        let out = self.predict_natural_vars(&mut g, v)?;
        Ok(g.value(out).data()[0])
    }

    /// `(alpha, e_xt)` for one instance.
    pub fn treatment_attention(&self, et: &[Vec<f64>], ex: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let (mut g, xv) = self.single_graph(ex)?;
        let tv = g.constant(tokens(et)?)?;
        let (alpha, e_xt) = self.treatment_attention_vars(&mut g, tv, xv)?;
        Ok((g.value(alpha).data().to_vec(), g.value(e_xt).data().to_vec()))
    }

    /// `(tau_hat, yk_logit)` for one instance.
    pub fn predict_ite_and_response(&self, e_xt: &[f64], y0_logit: f64) -> Result<(f64, f64), ModelError> {
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![1, e_xt.len()], e_xt.to_vec())?)?;
        let y0 = g.constant(Tensor::vector(vec![y0_logit]))?;
        let (tau, yk) = self.predict_ite_and_response_vars(&mut g, e, Some(y0))?;
        Ok((g.value(tau).data()[0], g.value(yk.expect("y0 supplied")).data()[0]))
    }

    pub fn predict_group(&self, e_xt: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![1, e_xt.len()], e_xt.to_vec())?)?;
        let out = self.predict_group_vars(&mut g, e)?;
        Ok(g.value(out).data().to_vec())
    }

    /// `e_xt` for each row with the treatment features replaced by those of
    /// treatment `k` (the representation the uplift head ranks on).
    pub fn uplift_representation(&self, rows: &[&Instance], k: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let desc = self.catalog.treatment(k)?.to_vec();
        let r = self.config.rank;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let batch = self.schema.prepare_batch(chunk, Some(&desc))?;
            let mut g = Graph::new();
            let fw = self.forward(&mut g, &batch, Heads::UPLIFT_ONLY)?;
            out.extend(split_rows(g.value(fw.e_xt).data(), r));
        }
        Ok(out)
    }
}

impl UpliftModel for Efin {
    fn kind(&self) -> ModelKind {
        ModelKind::Efin
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
        let fw = self.forward(g, batch, self.heads_for_training())?;
        Ok(self.loss(g, &fw, batch)?.total)
    }

    /// Encoder, treatment-aware attention and ITE head only.
    fn score_rows(&self, rows: &[&Instance], k: usize) -> Result<Vec<f64>, ModelError> {
        let desc = self.catalog.treatment(k)?.to_vec();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let batch = self.schema.prepare_batch(chunk, Some(&desc))?;
            let mut g = Graph::new();
            let fw = self.forward(&mut g, &batch, Heads::UPLIFT_ONLY)?;
            out.extend_from_slice(g.value(fw.tau).data());
        }
        Ok(out)
    }
}
