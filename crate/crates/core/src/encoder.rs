//! Feature encoding.
//!
//! Every feature becomes one embedding of width `dim`. Continuous features
//! are standardized with training-split statistics and mapped affinely
//! (`w * value + b`), so equal steps in value give equal steps in embedding
//! space. Sparse features are rows of an embedding table; out-of-vocabulary
//! values fall back to row 0.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Instance};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("feature `{feature}` has non-finite value {value}")]
    NonFinite { feature: String, value: f64 },
    #[error("instance has {got} {group} features, schema expects {expected}")]
    Arity { group: &'static str, expected: usize, got: usize },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("unknown treatment {treatment}; valid treatments are 1..={max}")]
    UnknownTreatment { treatment: usize, max: usize },
    #[error("malformed schema document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Vocabulary size; sparse only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    /// Row used for unseen categories; sparse only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oov_index: Option<usize>,
    /// Training mean; continuous only. Also the imputation value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>, mean: f64, std: f64) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Continuous,
            cardinality: None,
            oov_index: None,
            mean: Some(mean),
            std: Some(std),
        }
    }

    pub fn sparse(name: impl Into<String>, cardinality: usize) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Sparse,
            cardinality: Some(cardinality),
            oov_index: Some(0),
            mean: None,
            std: None,
        }
    }

    /// Maps a raw value to the encoder's input domain: standardized real for
    /// continuous features (missing imputed with the mean), row index for
    /// sparse ones.
    pub fn prepare(&self, raw: f64) -> Result<PreparedValue, EncoderError> {
        match self.kind {
            FeatureKind::Continuous => {
                let mean = self.mean.unwrap_or(0.0);
                let std = self.std.unwrap_or(1.0);
                let v = if raw.is_nan() { mean } else { raw };
                if !v.is_finite() {
                    return Err(EncoderError::NonFinite { feature: self.name.clone(), value: raw });
                }
                Ok(PreparedValue::Continuous((v - mean) / std))
            }
            FeatureKind::Sparse => Ok(PreparedValue::Index(self.index_of(raw))),
        }
    }

    fn index_of(&self, raw: f64) -> usize {
        let card = self.cardinality.unwrap_or(1);
        if raw.is_finite() && raw >= 0.0 && raw.fract() == 0.0 && (raw as usize) < card {
            raw as usize
        } else {
            self.oov_index.unwrap_or(0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PreparedValue {
    Continuous(f64),
    Index(usize),
}

/// Ordered feature declarations for the non-treatment (`x`) and treatment
/// (`t`) groups. `t[0]` is the treatment index with cardinality `K + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub x: Vec<FeatureSpec>,
    pub t: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(x: Vec<FeatureSpec>, t: Vec<FeatureSpec>) -> Result<Self, EncoderError> {
        let schema = FeatureSchema { x, t };
        schema.validate()?;
        Ok(schema)
    }

    /// Derives a schema from a (training) sample: normalization statistics
    /// for continuous columns and, where not declared, sparse vocabularies.
    pub fn build(sample: &Dataset) -> Result<Self, EncoderError> {
        if sample.is_empty() {
            return Err(EncoderError::Schema("cannot build a schema from an empty sample".into()));
        }
        let decl = &sample.declarations;
        let column = |group: &[crate::data::ColumnDecl], pick: fn(&Instance) -> &[f64]| -> Vec<FeatureSpec> {
            group
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let values = sample.rows.iter().map(|r| pick(r)[j]);
                    match c.kind {
                        FeatureKind::Continuous => {
                            let (mean, std) = mean_std(values.filter(|v| v.is_finite()));
                            FeatureSpec::continuous(&c.name, mean, std)
                        }
                        FeatureKind::Sparse => {
                            let inferred = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max) as usize + 1;
                            FeatureSpec::sparse(&c.name, c.cardinality.unwrap_or(inferred))
                        }
                    }
                })
                .collect()
        };
        FeatureSchema::new(column(&decl.x, |r| &r.x), column(&decl.t, |r| &r.t))
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let first = self.t.first().ok_or_else(|| EncoderError::Schema("no treatment features".into()))?;
        if first.kind != FeatureKind::Sparse || first.cardinality.unwrap_or(0) < 2 {
            return Err(EncoderError::Schema("treatment index must be sparse with cardinality >= 2".into()));
        }
        if self.x.is_empty() {
            return Err(EncoderError::Schema("no non-treatment features".into()));
        }
        let mut names = std::collections::HashSet::new();
        for spec in self.x.iter().chain(&self.t) {
            if !names.insert(spec.name.as_str()) {
                return Err(EncoderError::Schema(format!("duplicate feature name `{}`", spec.name)));
            }
            if spec.kind == FeatureKind::Sparse && spec.cardinality.unwrap_or(0) < 1 {
                return Err(EncoderError::Schema(format!("sparse feature `{}` needs cardinality >= 1", spec.name)));
            }
        }
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.x.len()
    }

    pub fn d_t(&self) -> usize {
        self.t.len()
    }

    /// Number of non-control treatments `K`.
    pub fn treatments(&self) -> usize {
        self.t[0].cardinality.unwrap_or(1) - 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("schema serializes");
        Sha256::digest(&compact).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn check_instance(&self, inst: &Instance) -> Result<(), EncoderError> {
        if inst.x.len() != self.d_x() {
            return Err(EncoderError::Arity { group: "non-treatment", expected: self.d_x(), got: inst.x.len() });
        }
        if inst.t.len() != self.d_t() {
            return Err(EncoderError::Arity { group: "treatment", expected: self.d_t(), got: inst.t.len() });
        }
        Ok(())
    }

    /// Column-major prepared inputs for a batch. When `treatment` is given,
    /// every row's treatment features are replaced by that descriptor.
    pub fn prepare_batch(&self, rows: &[&Instance], treatment: Option<&[f64]>) -> Result<PreparedBatch, EncoderError> {
        let prep_group = |specs: &[FeatureSpec], values: &dyn Fn(&Instance, usize) -> f64| {
            specs
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    let col: Result<Vec<PreparedValue>, _> = rows.iter().map(|r| spec.prepare(values(r, j))).collect();
                    col.map(|c| match spec.kind {
                        FeatureKind::Continuous => PreparedColumn::Continuous(
                            c.into_iter().map(|v| if let PreparedValue::Continuous(x) = v { x } else { 0.0 }).collect(),
                        ),
                        FeatureKind::Sparse => PreparedColumn::Sparse(
                            c.into_iter().map(|v| if let PreparedValue::Index(i) = v { i } else { 0 }).collect(),
                        ),
                    })
                })
                .collect::<Result<Vec<_>, EncoderError>>()
        };
        for r in rows {
            self.check_instance(r)?;
        }
        if let Some(desc) = treatment {
            if desc.len() != self.d_t() {
                return Err(EncoderError::Arity { group: "treatment", expected: self.d_t(), got: desc.len() });
            }
        }
        let x = prep_group(&self.x, &|r, j| r.x[j])?;
        let t = match treatment {
            Some(desc) => prep_group(&self.t, &|_, j| desc[j])?,
            None => prep_group(&self.t, &|r, j| r.t[j])?,
        };
        Ok(PreparedBatch {
            len: rows.len(),
            x,
            t,
            y: rows.iter().map(|r| r.y).collect(),
            groups: rows.iter().map(|r| r.group()).collect(),
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let std = (m2 / n).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedColumn {
    Continuous(Vec<f64>),
    Sparse(Vec<usize>),
}

/// Batch inputs after standardization and vocabulary mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub len: usize,
    pub x: Vec<PreparedColumn>,
    pub t: Vec<PreparedColumn>,
    pub y: Vec<f64>,
    /// Observed treatment index per row (not affected by descriptor overrides).
    pub groups: Vec<usize>,
}

impl PreparedBatch {
    /// Rows `idx` of this batch, in the given order.
    pub fn select(&self, idx: &[usize]) -> PreparedBatch {
        let pick = |cols: &[PreparedColumn]| {
            cols.iter()
                .map(|c| match c {
                    PreparedColumn::Continuous(v) => PreparedColumn::Continuous(idx.iter().map(|&i| v[i]).collect()),
                    PreparedColumn::Sparse(v) => PreparedColumn::Sparse(idx.iter().map(|&i| v[i]).collect()),
                })
                .collect()
        };
        PreparedBatch {
            len: idx.len(),
            x: pick(&self.x),
            t: pick(&self.t),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i]).collect(),
        }
    }
}

/// Raw treatment-feature vector for each treatment index `0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentCatalog {
    descriptors: Vec<Vec<f64>>,
}

impl TreatmentCatalog {
    pub fn new(descriptors: Vec<Vec<f64>>) -> Self {
        TreatmentCatalog { descriptors }
    }

    /// First observed treatment features for each index. Indices never seen
    /// get `[k, missing...]`, which imputes the remaining features.
    pub fn from_dataset(dataset: &Dataset, treatments: usize) -> Self {
        let d_t = dataset.declarations.t.len();
        let mut descriptors: Vec<Option<Vec<f64>>> = vec![None; treatments + 1];
        for row in &dataset.rows {
            if let Some(slot) = descriptors.get_mut(row.group()) {
                slot.get_or_insert_with(|| row.t.clone());
            }
        }
        let descriptors = descriptors
            .into_iter()
            .enumerate()
            .map(|(k, d)| {
                d.unwrap_or_else(|| std::iter::once(k as f64).chain(std::iter::repeat_n(f64::NAN, d_t - 1)).collect())
            })
            .collect();
        TreatmentCatalog { descriptors }
    }

    pub fn treatments(&self) -> usize {
        self.descriptors.len().saturating_sub(1)
    }

    pub fn control(&self) -> &[f64] {
        &self.descriptors[0]
    }

    /// Descriptor of treatment `k` in `1..=K`.
    pub fn treatment(&self, k: usize) -> Result<&[f64], EncoderError> {
        if k == 0 || k >= self.descriptors.len() {
            return Err(EncoderError::UnknownTreatment { treatment: k, max: self.treatments() });
        }
        Ok(&self.descriptors[k])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureParams {
    Lookup { table: ParamId },
    Affine { weight: ParamId, bias: ParamId },
}

/// Embedding parameters for both feature groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dim: usize,
    pub x: Vec<FeatureParams>,
    pub t: Vec<FeatureParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderOptions {
    pub dim: usize,
    /// One `(w, b)` shared by all continuous features of a group instead of
    /// one per feature.
    pub shared_continuous: bool,
    /// Half-width of the zero-mean uniform initialisation.
    pub init_scale: f64,
}

impl EncoderOptions {
    pub fn new(dim: usize) -> Self {
        EncoderOptions { dim, shared_continuous: false, init_scale: 1.0 }
    }
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if scale == 0.0 { 0.0 } else { rng.random_range(-scale..scale) }).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

impl EncoderParams {
    /// Registers encoder parameters under `prefix` for the given groups.
    /// Passing `include_t = false` builds an encoder for `x` only.
    pub fn init<R: Rng + ?Sized>(
        schema: &FeatureSchema,
        opts: EncoderOptions,
        include_t: bool,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let mut group = |specs: &[FeatureSpec], tag: &str| -> Vec<FeatureParams> {
            let mut shared: Option<FeatureParams> = None;
            specs
                .iter()
                .map(|spec| match spec.kind {
                    FeatureKind::Sparse => {
                        let rows = spec.cardinality.unwrap_or(1);
                        let table = uniform_tensor(rng, &[rows, opts.dim], opts.init_scale);
                        FeatureParams::Lookup { table: store.add(format!("{prefix}.{tag}.{}.table", spec.name), table) }
                    }
                    FeatureKind::Continuous => {
                        if let (true, Some(p)) = (opts.shared_continuous, &shared) {
                            return p.clone();
                        }
                        let name = if opts.shared_continuous { "shared" } else { spec.name.as_str() };
                        let w = uniform_tensor(rng, &[1, opts.dim], opts.init_scale);
                        let b = uniform_tensor(rng, &[opts.dim], opts.init_scale);
                        let p = FeatureParams::Affine {
                            weight: store.add(format!("{prefix}.{tag}.{name}.weight"), w),
                            bias: store.add(format!("{prefix}.{tag}.{name}.bias"), b),
                        };
                        if opts.shared_continuous {
                            shared = Some(p.clone());
                        }
                        p
                    }
                })
                .collect()
        };
        let x = group(&schema.x, "x");
        let t = if include_t { group(&schema.t, "t") } else { Vec::new() };
        EncoderParams { dim: opts.dim, x, t }
    }

    /// Embedding of one prepared value.
    pub fn encode_feature(&self, store: &ParamStore, params: &FeatureParams, value: PreparedValue) -> Result<Vec<f64>, EncoderError> {
        match (params, value) {
            (FeatureParams::Affine { weight, bias }, PreparedValue::Continuous(v)) => {
                if !v.is_finite() {
                    return Err(EncoderError::NonFinite { feature: "continuous".into(), value: v });
                }
                let w = store.get(*weight).data();
                let b = store.get(*bias).data();
                Ok(w.iter().zip(b).map(|(w, b)| w * v + b).collect())
            }
            (FeatureParams::Lookup { table }, PreparedValue::Index(i)) => {
                let t = store.get(*table);
                let rows = t.shape()[0];
                let i = if i < rows { i } else { 0 };
                Ok(t.data()[i * self.dim..(i + 1) * self.dim].to_vec())
            }
            _ => Err(EncoderError::Schema("feature kind does not match its parameters".into())),
        }
    }

    /// Per-feature embeddings `(e_x, e_t)` of one instance, without a tape.
    pub fn encode_instance(
        &self,
        store: &ParamStore,
        schema: &FeatureSchema,
        inst: &Instance,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), EncoderError> {
        schema.check_instance(inst)?;
        let ex = schema
            .x
            .iter()
            .zip(&self.x)
            .zip(&inst.x)
            .map(|((spec, p), raw)| self.encode_feature(store, p, spec.prepare(*raw)?))
            .collect::<Result<_, _>>()?;
        let et = schema
            .t
            .iter()
            .zip(&self.t)
            .zip(&inst.t)
            .map(|((spec, p), raw)| self.encode_feature(store, p, spec.prepare(*raw)?))
            .collect::<Result<_, _>>()?;
        Ok((ex, et))
    }

    fn encode_columns(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        params: &[FeatureParams],
        columns: &[PreparedColumn],
        len: usize,
    ) -> Result<Var, EncoderError> {
        let mut parts = Vec::with_capacity(columns.len());
        for (p, col) in params.iter().zip(columns) {
            let emb = match (p, col) {
                (FeatureParams::Affine { weight, bias }, PreparedColumn::Continuous(values)) => {
                    let v = graph.constant(Tensor::new(vec![len, 1], values.clone())?)?;
                    let w = graph.param(store, *weight)?;
                    let b = graph.param(store, *bias)?;
                    let scaled = graph.matmul(v, w)?;
                    graph.add_bias(scaled, b)?
                }
                (FeatureParams::Lookup { table }, PreparedColumn::Sparse(idx)) => {
                    let t = graph.param(store, *table)?;
                    graph.gather_rows(t, idx)?
                }
                _ => return Err(EncoderError::Schema("feature kind does not match its parameters".into())),
            };
            parts.push(emb);
        }
        Ok(graph.stack(&parts, 1)?)
    }

    /// `[B, d_x, dim]` embeddings of the non-treatment features.
    pub fn encode_x(&self, graph: &mut Graph, store: &ParamStore, batch: &PreparedBatch) -> Result<Var, EncoderError> {
        self.encode_columns(graph, store, &self.x, &batch.x, batch.len)
    }

    /// `[B, d_t, dim]` embeddings of the treatment features.
    pub fn encode_t(&self, graph: &mut Graph, store: &ParamStore, batch: &PreparedBatch) -> Result<Var, EncoderError> {
        self.encode_columns(graph, store, &self.t, &batch.t, batch.len)
    }
}
