//! Binary model container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter tensor as little-endian `f64` in store order.
//! The header records the model kind, feature schema and its hash, treatment
//! catalog, model config, parameter layout and free-form metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BaselineConfig, SLearner, SLearnerParams, TLearner, TLearnerParams};
use crate::efin::{Efin, EfinConfig, EfinParams};
use crate::encoder::{FeatureSchema, TreatmentCatalog};
use crate::model::{AnyModel, ModelKind, UpliftModel};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"UPLIFTCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("schema hash mismatch: checkpoint {stored}, expected {expected}")]
    SchemaMismatch { stored: String, expected: String },
    #[error("tensor data truncated")]
    Truncated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    schema_hash: String,
    schema: FeatureSchema,
    catalog: TreatmentCatalog,
    config: serde_json::Value,
    params: serde_json::Value,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("model state serializes")
}

fn from_value<T: for<'de> Deserialize<'de>>(v: serde_json::Value) -> Result<T, CheckpointError> {
    serde_json::from_value(v).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn write<W: Write>(model: &AnyModel, metadata: &serde_json::Value, mut w: W) -> Result<(), CheckpointError> {
    let (config, params) = match model {
        AnyModel::Efin(m) => (to_value(&m.config), to_value(&m.params)),
        AnyModel::SLearner(m) => (to_value(&m.config), to_value(&m.params)),
        AnyModel::TLearner(m) => (to_value(&m.config), to_value(&m.params)),
    };
    let store = model.store();
    let header = Header {
        kind: model.kind(),
        schema_hash: model.schema().hash(),
        schema: model.schema().clone(),
        catalog: model.catalog().clone(),
        config,
        params,
        tensors: store.iter().map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(store.numel() * 8);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// A loaded model with the metadata stored alongside it.
pub struct Loaded {
    pub model: AnyModel,
    pub metadata: serde_json::Value,
}

/// Reads a checkpoint. When `expected` is given its hash must match the
/// stored schema hash.
pub fn read<R: Read>(mut r: R, expected: Option<&FeatureSchema>) -> Result<Loaded, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
    r.read_exact(&mut json).map_err(|_| CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.schema.hash() != header.schema_hash {
        return Err(CheckpointError::Header("stored schema does not match its hash".into()));
    }
    if let Some(s) = expected {
        let expected = s.hash();
        if expected != header.schema_hash {
            return Err(CheckpointError::SchemaMismatch { stored: header.schema_hash, expected });
        }
    }
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|_| CheckpointError::Truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        store.add(entry.name.clone(), t);
    }
    let (schema, catalog) = (header.schema, header.catalog);
    let model = match header.kind {
        ModelKind::Efin => {
            let config: EfinConfig = from_value(header.config)?;
            let params: EfinParams = from_value(header.params)?;
            AnyModel::Efin(Efin::from_parts(schema, catalog, config, store, params))
        }
        ModelKind::SLearner => {
            let config: BaselineConfig = from_value(header.config)?;
            let params: SLearnerParams = from_value(header.params)?;
            AnyModel::SLearner(SLearner::from_parts(schema, catalog, config, store, params))
        }
        ModelKind::TLearner => {
            let config: BaselineConfig = from_value(header.config)?;
            let params: TLearnerParams = from_value(header.params)?;
            AnyModel::TLearner(TLearner::from_parts(schema, catalog, config, store, params))
        }
    };
    Ok(Loaded { model, metadata: header.metadata })
}

pub fn save(model: &AnyModel, metadata: &serde_json::Value, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write(model, metadata, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, expected: Option<&FeatureSchema>) -> Result<Loaded, CheckpointError> {
    let file = std::fs::File::open(path)?;
    read(std::io::BufReader::new(file), expected)
}
