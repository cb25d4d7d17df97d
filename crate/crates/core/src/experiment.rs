//! Config-driven experiments: data loading, fitting, reports and the
//! subcommands behind the `upliftlab` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{self, CriteoTarget, DataError, Dataset, Declarations};
use crate::encoder::{EncoderError, FeatureSchema, TreatmentCatalog};
use crate::metrics::{self, MetricError, MetricOptions, MetricSummary};
use crate::model::{AnyModel, ModelError, ModelKind, ModelSpec, UpliftModel};
use crate::search::{grid_search, LeaderboardEntry, Trial};
use crate::synthetic::{self, GeneratorConfig, SyntheticError, SyntheticTruth};
use crate::train::{self, score_binary, EpochRecord, Evaluation, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Metric(MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Synthetic(SyntheticError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Divergence(_) => 3,
            ExperimentError::Metric(MetricError::Undefined(_) | MetricError::Empty) => 4,
            _ => 1,
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } | TrainError::AllTrialsDiverged(_) => ExperimentError::Divergence(e.to_string()),
            TrainError::Config(m) => ExperimentError::Config(format!("train: {m}")),
            TrainError::Metric(m) => ExperimentError::Metric(m),
            TrainError::Data(d) => ExperimentError::Data(d),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => ExperimentError::Config(format!("model: {m}")),
            other => ExperimentError::Model(other),
        }
    }
}

impl From<EncoderError> for ExperimentError {
    fn from(e: EncoderError) -> Self {
        ExperimentError::Model(ModelError::Encoder(e))
    }
}

impl From<MetricError> for ExperimentError {
    fn from(e: MetricError) -> Self {
        ExperimentError::Metric(e)
    }
}

impl From<SyntheticError> for ExperimentError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::Config(m) => ExperimentError::Config(format!("data: {m}")),
            SyntheticError::EffectRange(_) => ExperimentError::Config(format!("data: {e}")),
            other => ExperimentError::Synthetic(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn default_structure_seed() -> u64 {
    1
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Where the rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Random linear effect surfaces (see [`GeneratorConfig::linear_rct`]).
    Synthetic {
        d_x: usize,
        treatments: usize,
        n: usize,
        #[serde(default = "default_structure_seed")]
        structure_seed: u64,
        #[serde(default)]
        seed: u64,
        /// Assignment confounding strength; `None` means a balanced RCT.
        #[serde(default)]
        confounding: Option<f64>,
        #[serde(default)]
        zero_effect: bool,
    },
    /// A fully specified generator.
    Generator { config: GeneratorConfig },
    Csv { path: PathBuf, declarations: Declarations },
    Criteo {
        path: PathBuf,
        target: CriteoTarget,
        /// Seeded subsample fraction applied after loading.
        #[serde(default)]
        fraction: Option<f64>,
        #[serde(default)]
        sample_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Share of rows used for training (the rest is the test set).
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub stratified: bool,
}

fn default_lift_h() -> f64 {
    30.0
}

fn default_bins() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_lift_h")]
    pub lift_h: f64,
    #[serde(default = "default_bins")]
    pub wau_bins: usize,
    /// Scored-record CSV read by `score-file`.
    #[serde(default)]
    pub input: Option<PathBuf>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { lift_h: 30.0, wau_bins: 10, input: None }
    }
}

impl MetricsSection {
    pub fn options(&self) -> MetricOptions {
        MetricOptions { lift_h: self.lift_h, wau_bins: self.wau_bins }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DataSource::Csv { path, .. } | DataSource::Criteo { path, .. } => fix(path),
            _ => {}
        }
        if let Some(p) = &mut self.metrics.input {
            fix(p);
        }
    }

    /// Replaces the training seed and, for generated data, the sampling seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        match &mut self.data.source {
            DataSource::Synthetic { seed: s, .. } => *s = seed,
            DataSource::Generator { config } => config.seed = seed,
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |m: String| Err(ExperimentError::Config(m));
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return err(format!("data.train_fraction: must lie in (0, 1), got {f}"));
        }
        match &self.data.source {
            DataSource::Synthetic { d_x, treatments, n, confounding, .. } => {
                if *d_x == 0 || *treatments == 0 || *n == 0 {
                    return err("data: d_x, treatments and n must be positive".into());
                }
                if confounding.is_some() && *d_x < 2 {
                    return err("data.confounding: needs d_x >= 2".into());
                }
            }
            DataSource::Generator { config } => config.validate()?,
            DataSource::Csv { declarations, .. } => {
                declarations.validate().map_err(|e| ExperimentError::Config(format!("data.declarations: {e}")))?
            }
            DataSource::Criteo { fraction: Some(p), .. } if !(*p > 0.0 && *p <= 1.0) => {
                return err(format!("data.fraction: must lie in (0, 1], got {p}"));
            }
            DataSource::Criteo { .. } => {}
        }
        if self.model.rank == 0 {
            return err("model.rank: must be positive".into());
        }
        if !(self.model.constraint_weight >= 0.0 && self.model.constraint_weight.is_finite()) {
            return err("model.constraint_weight: must be finite and non-negative".into());
        }
        if !(self.model.encoder_init_scale >= 0.0 && self.model.encoder_init_scale.is_finite()) {
            return err("model.encoder_init_scale: must be finite and non-negative".into());
        }
        self.train.validate().map_err(|e| match e {
            TrainError::Config(m) => ExperimentError::Config(format!("train.{m}")),
            other => other.into(),
        })?;
        if let Some(s) = &self.train.search {
            if s.selected().is_empty() {
                return err("train.search: grid is empty".into());
            }
        }
        if !(self.metrics.lift_h > 0.0 && self.metrics.lift_h <= 100.0) {
            return err(format!("metrics.lift_h: must lie in (0, 100], got {}", self.metrics.lift_h));
        }
        if self.metrics.wau_bins == 0 {
            return err("metrics.wau_bins: must be positive".into());
        }
        Ok(())
    }
}

/// The generator described by a synthetic source, if any.
pub fn generator(source: &DataSource) -> Option<GeneratorConfig> {
    match source {
        DataSource::Synthetic { d_x, treatments, n, structure_seed, seed, confounding, zero_effect } => {
            let mut g = GeneratorConfig::linear_rct(*d_x, *treatments, *n, *structure_seed, *seed);
            if let Some(s) = confounding {
                g = g.confounded(*s);
            }
            if *zero_effect {
                g = g.zero_effect();
            }
            Some(g)
        }
        DataSource::Generator { config } => Some(config.clone()),
        _ => None,
    }
}

/// Loads every row described by `source`, with synthetic truth when known.
pub fn load_rows(source: &DataSource) -> Result<(Dataset, Option<Vec<SyntheticTruth>>), ExperimentError> {
    if let Some(g) = generator(source) {
        let (ds, truth) = synthetic::generate(&g)?;
        return Ok((ds, Some(truth)));
    }
    let report = match source {
        DataSource::Csv { path, declarations } => data::load_csv(path, declarations)?,
        DataSource::Criteo { path, target, .. } => data::load_criteo(path, *target)?,
        _ => unreachable!("generated sources handled above"),
    };
    let mut ds = report.dataset;
    if let DataSource::Criteo { fraction: Some(p), sample_seed, .. } = source {
        ds = data::subsample(&ds, *p, *sample_seed)?;
    }
    Ok((ds, None))
}

/// Train, validation and test partitions with the schema fitted on the
/// training rows.
pub struct Prepared {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub schema: FeatureSchema,
    pub catalog: TreatmentCatalog,
}

/// Splits off the test set, then carves the validation share out of the
/// training rows. Both splits are seeded from the training seed.
pub fn prepare(dataset: &Dataset, section: &DataSection, cfg: &TrainConfig) -> Result<Prepared, ExperimentError> {
    let splitter = if section.stratified { data::split_stratified } else { data::split };
    let (fit, test) = splitter(dataset, section.train_fraction, cfg.seed)?;
    let (train_rows, validation) = splitter(&fit, 1.0 - cfg.validation_fraction, cfg.seed.wrapping_add(1))?;
    prepare_split(train_rows, validation, test)
}

/// Builds the schema and catalog for an explicit three-way split.
pub fn prepare_split(train: Dataset, validation: Dataset, test: Dataset) -> Result<Prepared, ExperimentError> {
    let schema = FeatureSchema::build(&train)?;
    let catalog = TreatmentCatalog::from_dataset(&train, schema.treatments());
    Ok(Prepared { train, validation, test, schema, catalog })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub provenance: String,
    pub train_rows: usize,
    pub validation_rows: usize,
    pub test_rows: usize,
    pub treatments: usize,
    pub schema_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub best: Trial,
    pub leaderboard: Vec<LeaderboardEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

/// Everything a run produced. Only `timing` varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub build: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Model and training settings actually used (after tuning, if any).
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataSummary,
    pub search: Option<SearchSummary>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_qini: f64,
    pub test: Evaluation,
    pub timing: Timing,
}

pub fn build_id() -> String {
    match option_env!("UPLIFTLAB_BUILD") {
        Some(b) => format!("upliftlab {} ({b})", env!("CARGO_PKG_VERSION")),
        None => format!("upliftlab {}", env!("CARGO_PKG_VERSION")),
    }
}

impl ExperimentReport {
    /// JSON of the report without wall-clock timing.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fits the configured model (tuning first when a search is configured) and
/// evaluates it on the test rows.
pub fn fit(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    command: &str,
    leaderboard: Option<&Path>,
) -> Result<(AnyModel, ExperimentReport), ExperimentError> {
    let started = Instant::now();
    let seed = cfg.train.seed;
    let (model, spec, train_cfg, outcome, search) = match &cfg.train.search {
        Some(search) => {
            let o = grid_search(
                &cfg.model,
                &cfg.train,
                search,
                &prepared.schema,
                &prepared.catalog,
                &prepared.train,
                &prepared.validation,
                seed,
                leaderboard,
            )?;
            let summary = SearchSummary { best: o.best, leaderboard: o.leaderboard };
            (o.model, o.best_spec, o.best_config, o.best_outcome, Some(summary))
        }
        None => {
            let c = &cfg.train;
            let mut m = cfg.model.build(prepared.schema.clone(), prepared.catalog.clone(), c.loss_weights(), seed)?;
            let o = train::train(&mut m, &prepared.train, &prepared.validation, c)?;
            (m, cfg.model.clone(), c.clone(), o, None)
        }
    };
    let test = train::evaluate(&model, &prepared.test, &cfg.metrics.options())?;
    let report = ExperimentReport {
        build: build_id(),
        command: command.to_string(),
        seed,
        config: cfg.clone(),
        model: spec,
        train: train_cfg,
        data: DataSummary {
            provenance: prepared.train.provenance.clone(),
            train_rows: prepared.train.len(),
            validation_rows: prepared.validation.len(),
            test_rows: prepared.test.len(),
            treatments: prepared.schema.treatments(),
            schema_hash: prepared.schema.hash(),
        },
        search,
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        best_validation_qini: outcome.best_validation_qini,
        test,
        timing: Timing { wall_seconds: started.elapsed().as_secs_f64() },
    };
    Ok((model, report))
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes `qini_k{k}.csv` and `uplift_k{k}.csv` for every treatment.
pub fn write_curves<M: UpliftModel + ?Sized>(model: &M, test: &Dataset, dir: &Path) -> Result<(), ExperimentError> {
    for k in 1..=model.treatments() {
        let records = score_binary(model, test, k)?;
        write_curve_pair(&records, dir, &format!("_k{k}"))?;
    }
    Ok(())
}

fn write_curve_pair(records: &[metrics::ScoredRecord], dir: &Path, suffix: &str) -> Result<(), ExperimentError> {
    for (name, curve) in [("qini", metrics::qini(records)?.0), ("uplift", metrics::auuc(records)?.0)] {
        let path = dir.join(format!("{name}{suffix}.csv"));
        let f = std::fs::File::create(&path).map_err(io_err(&path))?;
        curve.write_csv(std::io::BufWriter::new(f)).map_err(io_err(&path))?;
    }
    Ok(())
}

/// `train`: fit, evaluate, and write `report.json`, curves and `model.ckpt`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport, ExperimentError> {
    ensure_dir(out)?;
    let (rows, _) = load_rows(&cfg.data.source)?;
    let prepared = prepare(&rows, &cfg.data, &cfg.train)?;
    let board = out.join("leaderboard.jsonl");
    let (model, report) = fit(cfg, &prepared, "train", cfg.train.search.as_ref().map(|_| board.as_path()))?;
    write_text(&out.join("report.json"), &report.to_json_pretty())?;
    write_curves(&model, &prepared.test, out)?;
    let meta = serde_json::json!({ "test_qini": report.test.average.qini, "seed": report.seed, "build": report.build });
    checkpoint::save(&model, &meta, out.join("model.ckpt"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub build: String,
    pub checkpoint: PathBuf,
    pub kind: ModelKind,
    pub test: Evaluation,
    pub checkpoint_test_qini: Option<f64>,
    /// Recomputed test QINI is bit-identical to the stored one.
    pub reproduces_checkpoint: Option<bool>,
}

/// `evaluate`: rebuild the test split and score it with a saved model.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<EvaluationReport, ExperimentError> {
    ensure_dir(out)?;
    let (rows, _) = load_rows(&cfg.data.source)?;
    let prepared = prepare(&rows, &cfg.data, &cfg.train)?;
    let loaded = checkpoint::load(checkpoint_path, Some(&prepared.schema))?;
    let test = train::evaluate(&loaded.model, &prepared.test, &cfg.metrics.options())?;
    let stored = loaded.metadata.get("test_qini").and_then(serde_json::Value::as_f64);
    let report = EvaluationReport {
        build: build_id(),
        checkpoint: checkpoint_path.to_path_buf(),
        kind: loaded.model.kind(),
        reproduces_checkpoint: stored.map(|q| q.to_bits() == test.average.qini.to_bits()),
        checkpoint_test_qini: stored,
        test,
    };
    write_text(&out.join("evaluation.json"), &serde_json::to_string_pretty(&report).expect("serializes"))?;
    write_curves(&loaded.model, &prepared.test, out)?;
    Ok(report)
}

/// `generate`: write `synthetic.csv` and `synthetic.truth.csv`.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, ExperimentError> {
    let g = generator(&cfg.data.source)
        .ok_or_else(|| ExperimentError::Config("data.source: `generate` needs a synthetic or generator source".into()))?;
    ensure_dir(out)?;
    let (ds, truth) = synthetic::generate(&g)?;
    synthetic::save(&ds, &truth, out, "synthetic")?;
    write_text(&out.join("synthetic.declarations.json"), &serde_json::to_string_pretty(&ds.declarations).expect("serializes"))?;
    Ok(out.join("synthetic.csv"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFileReport {
    pub input: PathBuf,
    pub records: usize,
    pub metrics: MetricSummary,
}

/// `score-file`: metrics and curves for a `score,treated,response` CSV.
pub fn run_score_file(cfg: &ExperimentConfig, input: Option<&Path>, out: &Path) -> Result<ScoreFileReport, ExperimentError> {
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.metrics.input.clone())
        .ok_or_else(|| ExperimentError::Config("metrics.input: required by `score-file`".into()))?;
    ensure_dir(out)?;
    let f = std::fs::File::open(&input).map_err(io_err(&input))?;
    let records = metrics::read_scored_csv(std::io::BufReader::new(f))?;
    let summary = metrics::summarize(&records, &cfg.metrics.options())?;
    write_curve_pair(&records, out, "")?;
    let report = ScoreFileReport { input, records: records.len(), metrics: summary };
    write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&report).expect("serializes"))?;
    Ok(report)
}

pub const ABLATIONS: [&str; 4] = ["full", "no_self_interaction", "no_treatment_aware", "no_intervention_constraint"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test: MetricSummary,
}

/// `ablate`: the full model and three single-module removals on one split.
/// Writes `ablation/<variant>/report.json` and `ablation.json`.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>, ExperimentError> {
    if cfg.model.kind != ModelKind::Efin {
        return Err(ExperimentError::Config("model.kind: `ablate` needs efin".into()));
    }
    let (rows, _) = load_rows(&cfg.data.source)?;
    let prepared = prepare(&rows, &cfg.data, &cfg.train)?;
    let mut table = Vec::new();
    for variant in ABLATIONS {
        let mut c = cfg.clone();
        let m = &mut c.model.modules;
        match variant {
            "no_self_interaction" => m.self_interaction = false,
            "no_treatment_aware" => m.treatment_aware = false,
            "no_intervention_constraint" => m.intervention_constraint = false,
            _ => {}
        }
        let dir = out.join("ablation").join(variant);
        ensure_dir(&dir)?;
        let (model, report) = fit(&c, &prepared, &format!("ablate:{variant}"), None)?;
        write_text(&dir.join("report.json"), &report.to_json_pretty())?;
        write_curves(&model, &prepared.test, &dir)?;
        table.push(AblationRow { variant: variant.to_string(), test: report.test.average });
    }
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&table).expect("serializes"))?;
    Ok(table)
}
