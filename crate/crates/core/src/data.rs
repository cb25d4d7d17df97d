//! Dataset ingestion and splitting.
//!
//! Two readers are provided: a fixed-layout reader for the CRITEO-UPLIFT
//! export and a generic reader driven by column declarations. Rows that fail
//! to parse are skipped and reported with their line number.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::FeatureKind;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("column `{0}` is present in the data but not declared")]
    UndeclaredColumn(String),
    #[error("row has {got} features, declarations expect {expected}")]
    Arity { expected: usize, got: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("split of {rows} rows at ratio {ratio} leaves one side empty")]
    DegenerateSplit { rows: usize, ratio: f64 },
    #[error("invalid declarations: {0}")]
    Declarations(String),
}

/// One marketing record: non-treatment features, treatment features (index
/// ID first) and a binary response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub y: f64,
}

impl Instance {
    /// Treatment index `t[0]`; 0 is control.
    pub fn group(&self) -> usize {
        self.t[0] as usize
    }

    pub fn is_control(&self) -> bool {
        self.group() == 0
    }
}

/// How one CSV column is interpreted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDecl {
    pub name: String,
    pub kind: FeatureKind,
    /// Vocabulary size for sparse columns; inferred from data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
}

impl ColumnDecl {
    pub fn continuous(name: impl Into<String>) -> Self {
        ColumnDecl { name: name.into(), kind: FeatureKind::Continuous, cardinality: None }
    }

    pub fn sparse(name: impl Into<String>, cardinality: Option<usize>) -> Self {
        ColumnDecl { name: name.into(), kind: FeatureKind::Sparse, cardinality }
    }
}

/// Column roles for a dataset. `t[0]` is the treatment index column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declarations {
    pub x: Vec<ColumnDecl>,
    pub t: Vec<ColumnDecl>,
    pub response: String,
    /// Columns present in files that are read and discarded.
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl Declarations {
    pub fn validate(&self) -> Result<(), DataError> {
        let first = self.t.first().ok_or_else(|| DataError::Declarations("no treatment columns".into()))?;
        if first.kind != FeatureKind::Sparse {
            return Err(DataError::Declarations(format!("treatment index column `{}` must be sparse", first.name)));
        }
        let mut seen = HashSet::new();
        for name in self.x.iter().chain(&self.t).map(|c| &c.name).chain(std::iter::once(&self.response)) {
            if !seen.insert(name) {
                return Err(DataError::Declarations(format!("duplicate column `{name}`")));
            }
        }
        Ok(())
    }

    /// Layout of the CRITEO-UPLIFT export with the chosen response column.
    pub fn criteo(target: CriteoTarget) -> Self {
        let (response, other) = match target {
            CriteoTarget::Visit => ("visit", "conversion"),
            CriteoTarget::Conversion => ("conversion", "visit"),
        };
        Declarations {
            x: (0..12).map(|i| ColumnDecl::continuous(format!("f{i}"))).collect(),
            t: vec![ColumnDecl::sparse("treatment", Some(2))],
            response: response.to_string(),
            ignore: vec![other.to_string(), "exposure".to_string()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriteoTarget {
    Visit,
    Conversion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub declarations: Declarations,
    pub rows: Vec<Instance>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(declarations: Declarations, rows: Vec<Instance>, provenance: impl Into<String>) -> Result<Self, DataError> {
        declarations.validate()?;
        let (dx, dt) = (declarations.x.len(), declarations.t.len());
        for row in &rows {
            if row.x.len() != dx {
                return Err(DataError::Arity { expected: dx, got: row.x.len() });
            }
            if row.t.len() != dt {
                return Err(DataError::Arity { expected: dt, got: row.t.len() });
            }
        }
        Ok(Dataset { declarations, rows, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn with_rows(&self, rows: Vec<Instance>, note: &str) -> Dataset {
        Dataset {
            declarations: self.declarations.clone(),
            rows,
            provenance: format!("{} | {note}", self.provenance),
        }
    }
}

/// A row that could not be parsed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<SkippedRow>,
}

pub fn load_criteo(path: impl AsRef<Path>, target: CriteoTarget) -> Result<LoadReport, DataError> {
    let path = path.as_ref();
    let decl = Declarations::criteo(target);
    read_declared(File::open(path)?, &decl, &format!("criteo:{}:{target:?}", path.display()))
}

/// Reads a CSV whose columns are described by `decl`. Any header column not
/// mentioned in `decl` is an error.
pub fn load_csv(path: impl AsRef<Path>, decl: &Declarations) -> Result<LoadReport, DataError> {
    let path = path.as_ref();
    read_declared(File::open(path)?, decl, &format!("csv:{}", path.display()))
}

pub fn read_declared<R: Read>(reader: R, decl: &Declarations, provenance: &str) -> Result<LoadReport, DataError> {
    decl.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(reader));
    let header = rdr.headers()?.clone();
    let position = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let x_idx: Vec<usize> = decl.x.iter().map(|c| position(&c.name)).collect::<Result<_, _>>()?;
    let t_idx: Vec<usize> = decl.t.iter().map(|c| position(&c.name)).collect::<Result<_, _>>()?;
    let y_idx = position(&decl.response)?;
    for ignored in &decl.ignore {
        position(ignored)?;
    }
    let known: HashSet<&str> = decl
        .x
        .iter()
        .chain(&decl.t)
        .map(|c| c.name.as_str())
        .chain(std::iter::once(decl.response.as_str()))
        .chain(decl.ignore.iter().map(String::as_str))
        .collect();
    if let Some(extra) = header.iter().find(|h| !known.contains(h.trim())) {
        return Err(DataError::UndeclaredColumn(extra.trim().to_string()));
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i as u64 + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkippedRow { line, reason: e.to_string() });
                continue;
            }
        };
        match parse_row(&record, &x_idx, &t_idx, y_idx, decl) {
            Ok(inst) => rows.push(inst),
            Err(reason) => skipped.push(SkippedRow { line, reason }),
        }
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let dataset = Dataset::new(decl.clone(), rows, provenance)?;
    Ok(LoadReport { dataset, skipped })
}

fn parse_field(raw: &str, decl: &ColumnDecl) -> Result<f64, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        // missing continuous values are imputed later; missing categories go to index 0
        return Ok(match decl.kind {
            FeatureKind::Continuous => f64::NAN,
            FeatureKind::Sparse => 0.0,
        });
    }
    let v: f64 = raw.parse().map_err(|_| format!("column `{}`: cannot parse `{raw}`", decl.name))?;
    match decl.kind {
        FeatureKind::Continuous if !v.is_finite() => Err(format!("column `{}`: non-finite value", decl.name)),
        FeatureKind::Sparse if v < 0.0 || v.fract() != 0.0 => {
            Err(format!("column `{}`: `{raw}` is not a category index", decl.name))
        }
        _ => Ok(v),
    }
}

fn parse_row(
    record: &csv::StringRecord,
    x_idx: &[usize],
    t_idx: &[usize],
    y_idx: usize,
    decl: &Declarations,
) -> Result<Instance, String> {
    let field = |i: usize| record.get(i).ok_or_else(|| format!("missing field {i}"));
    let x = x_idx.iter().zip(&decl.x).map(|(&i, c)| parse_field(field(i)?, c)).collect::<Result<_, _>>()?;
    let t = t_idx.iter().zip(&decl.t).map(|(&i, c)| parse_field(field(i)?, c)).collect::<Result<_, _>>()?;
    let y_raw = field(y_idx)?.trim();
    let y: f64 = y_raw.parse().map_err(|_| format!("response: cannot parse `{y_raw}`"))?;
    if y != 0.0 && y != 1.0 {
        return Err(format!("response must be 0 or 1, got `{y_raw}`"));
    }
    Ok(Instance { x, t, y })
}

/// Writes `dataset` with header `x..., t..., response`. Missing values are
/// written as empty fields; reals use the shortest round-trip form.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    let d = &dataset.declarations;
    let header: Vec<&str> = d.x.iter().chain(&d.t).map(|c| c.name.as_str()).chain([d.response.as_str()]).collect();
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for row in &dataset.rows {
        line.clear();
        for v in row.x.iter().chain(&row.t) {
            if !v.is_nan() {
                line.push_str(&v.to_string());
            }
            line.push(',');
        }
        line.push_str(&row.y.to_string());
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_csv(dataset, File::create(path)?)
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn take(rows: &[Instance], idx: &[usize]) -> Vec<Instance> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Seeded uniform shuffle followed by a prefix split of `round(ratio * n)` rows.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let n = dataset.len();
    let cut = (ratio * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(DataError::DegenerateSplit { rows: n, ratio });
    }
    let order = seeded_permutation(n, seed);
    let note = format!("split {ratio} seed {seed}");
    Ok((
        dataset.with_rows(take(&dataset.rows, &order[..cut]), &format!("{note} head")),
        dataset.with_rows(take(&dataset.rows, &order[cut..]), &format!("{note} tail")),
    ))
}

/// Like [`split`] but applies the ratio inside each treatment group.
pub fn split_stratified(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let order = seeded_permutation(dataset.len(), seed);
    let groups = dataset.rows.iter().map(Instance::group).max().map_or(0, |g| g + 1);
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for g in 0..groups {
        let members: Vec<usize> = order.iter().copied().filter(|&i| dataset.rows[i].group() == g).collect();
        let cut = (ratio * members.len() as f64).round() as usize;
        head.extend_from_slice(&members[..cut]);
        tail.extend_from_slice(&members[cut..]);
    }
    if head.is_empty() || tail.is_empty() {
        return Err(DataError::DegenerateSplit { rows: dataset.len(), ratio });
    }
    let note = format!("stratified split {ratio} seed {seed}");
    Ok((
        dataset.with_rows(take(&dataset.rows, &head), &format!("{note} head")),
        dataset.with_rows(take(&dataset.rows, &tail), &format!("{note} tail")),
    ))
}

/// Seeded subsample keeping `round(fraction * n)` rows in original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidRatio(fraction));
    }
    let keep = (fraction * dataset.len() as f64).round() as usize;
    if keep == 0 {
        return Err(DataError::Empty);
    }
    let mut idx = seeded_permutation(dataset.len(), seed);
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(dataset.with_rows(take(&dataset.rows, &idx), &format!("subsample {fraction} seed {seed}")))
}
