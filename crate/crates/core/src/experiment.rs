//! End-to-end experiments: benchmark construction, feature extraction,
//! tagger training, detector calibration and scoring over a grid of
//! unknown-type selections, train strategies and seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{
    benchmark_stats, build_benchmark, BenchmarkStats, NsdBenchmark, NsdConfig, Strategy,
    UnknownSelection,
};
use crate::corpus::{
    derive_schema, parse_conll, parse_seq_pair, CasePolicy, CorpusError, CorpusSplits,
    LabeledUtterance, SlotSchema, Tag,
};
use crate::crf::{self, Objective, TaggerModel, TrainConfig, TrainingReport};
use crate::detect::{
    apply_thresholds, calibrate_detector, fit_gda_for_objective, score_utterances,
    CalibratedDetector, DetectObjective, DetectorModels, DetectorSpec, DistanceMetric, GdaModel,
    Method, PredictionSet,
};
use crate::exec::Parallelism;
use crate::features::{
    hash_corpus, load_embeddings, FeatureError, FeatureSource, HashedFeatureSpec,
    TokenFeatureMatrix,
};
use crate::metrics::{evaluate, MetricsReport, ROSE_LEVELS};
use crate::synthetic::{self, SyntheticConfig};

/// Version of the report layout written by [`write_report`].
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Corpus {
        path: PathBuf,
        #[source]
        source: CorpusError,
    },
    #[error("no {split} split found in {dir} (looked for {tried})")]
    MissingSplit {
        dir: PathBuf,
        split: &'static str,
        tried: String,
    },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("every seed failed")]
    AllSeedsFailed,
    #[error("{0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const SPLIT_NAMES: [(&str, &[&str]); 3] = [
    ("train", &["train"]),
    ("val", &["valid", "val", "dev"]),
    ("test", &["test"]),
];

/// Loads train/val/test from a directory holding either `<split>.conll`
/// files or `<split>/seq.in` + `<split>/seq.out` pairs. The validation split
/// may be called `valid`, `val` or `dev`.
pub fn load_corpus_dir(dir: &Path) -> Result<CorpusSplits, ExperimentError> {
    let mut splits = Vec::with_capacity(3);
    for (split, names) in SPLIT_NAMES {
        let mut tried = Vec::new();
        let mut found = None;
        for name in names {
            let conll = dir.join(format!("{name}.conll"));
            let seq_in = dir.join(name).join("seq.in");
            let seq_out = dir.join(name).join("seq.out");
            if conll.is_file() {
                let text = fs::read_to_string(&conll).map_err(io_err(&conll))?;
                found = Some(
                    parse_conll(&text).map_err(|source| ExperimentError::Corpus {
                        path: conll.clone(),
                        source,
                    })?,
                );
                break;
            }
            if seq_in.is_file() && seq_out.is_file() {
                let toks = fs::read_to_string(&seq_in).map_err(io_err(&seq_in))?;
                let tags = fs::read_to_string(&seq_out).map_err(io_err(&seq_out))?;
                found = Some(parse_seq_pair(&toks, &tags).map_err(|source| {
                    ExperimentError::Corpus {
                        path: seq_in.clone(),
                        source,
                    }
                })?);
                break;
            }
            tried.push(format!("{name}.conll, {name}/seq.in+seq.out"));
        }
        splits.push(found.ok_or_else(|| ExperimentError::MissingSplit {
            dir: dir.to_path_buf(),
            split,
            tried: tried.join("; "),
        })?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    CorpusSplits::new(train, val, test).map_err(|source| ExperimentError::Corpus {
        path: dir.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Dir(PathBuf),
    Synthetic(SyntheticConfig),
}

impl CorpusSource {
    pub fn load(&self) -> Result<CorpusSplits, ExperimentError> {
        match self {
            CorpusSource::Dir(p) => load_corpus_dir(p),
            CorpusSource::Synthetic(c) => Ok(synthetic::generate(c)),
        }
    }
}

/// Tagger training settings shared by every run. The shuffle seed is the
/// run seed; a missing learning rate uses the feature source's default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: None,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            l2: d.l2,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, features: &FeatureSource, seed: u64, par: Parallelism) -> TrainConfig {
        TrainConfig {
            learning_rate: self
                .learning_rate
                .unwrap_or_else(|| features.default_learning_rate()),
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            l2: self.l2,
            seed,
            parallelism: par,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdaSettings {
    pub ridge: Option<f64>,
    pub metric: DistanceMetric,
}

mod spec_strings {
    use super::DetectorSpec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DetectorSpec], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|d| d.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DetectorSpec>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

fn default_selections() -> Vec<UnknownSelection> {
    vec![UnknownSelection::Proportion(0.15)]
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Remove]
}

fn default_detectors() -> Vec<DetectorSpec> {
    vec!["gda:multiple:minimum".parse().unwrap()]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_features() -> FeatureSource {
    FeatureSource::Hashed(HashedFeatureSpec::new(1024))
}

fn default_output() -> PathBuf {
    PathBuf::from("nsd-run")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    #[serde(default = "default_selections")]
    pub selections: Vec<UnknownSelection>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_detectors", with = "spec_strings")]
    pub detectors: Vec<DetectorSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_features")]
    pub features: FeatureSource,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub gda: GdaSettings,
    #[serde(default)]
    pub case_policy: CasePolicy,
    /// Slot types treated as open-vocabulary in the error table.
    #[serde(default)]
    pub open_vocab: Vec<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl ExperimentConfig {
    pub fn new(corpus: CorpusSource) -> Self {
        Self {
            corpus,
            selections: default_selections(),
            strategies: default_strategies(),
            detectors: default_detectors(),
            seeds: default_seeds(),
            features: default_features(),
            train: TrainSettings::default(),
            gda: GdaSettings::default(),
            case_policy: CasePolicy::default(),
            open_vocab: Vec::new(),
            output_dir: default_output(),
            parallelism: Parallelism::default(),
        }
    }

    /// Seeds `base, base + 1, ..., base + runs - 1`.
    pub fn seed_range(base: u64, runs: usize) -> Vec<u64> {
        (0..runs as u64).map(|i| base + i).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.selections.is_empty() || self.strategies.is_empty() || self.detectors.is_empty() {
            return bad("selections, strategies and detectors must be nonempty".into());
        }
        for d in &self.detectors {
            d.validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if let CorpusSource::Dir(p) = &self.corpus {
            if !p.is_dir() {
                return bad(format!("corpus directory {} does not exist", p.display()));
            }
        }
        match &self.features {
            FeatureSource::File { path } => {
                for split in ["train", "val", "test"] {
                    let f = path.join(format!("{split}.nsde"));
                    if !f.is_file() {
                        return bad(format!("embedding file {} does not exist", f.display()));
                    }
                }
                if self.strategies.contains(&Strategy::Mask) {
                    return bad(
                        "file features cannot follow the mask strategy's token rewrite".into(),
                    );
                }
            }
            FeatureSource::Hashed(spec) => spec.validate()?,
        }
        if let Some(r) = self.gda.ridge {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("ridge must be positive, got {r}"));
            }
        }
        Ok(())
    }
}

/// Token features of a benchmark's three splits.
pub struct SplitFeatures {
    pub train: Vec<TokenFeatureMatrix>,
    pub val: Vec<TokenFeatureMatrix>,
    pub test: Vec<TokenFeatureMatrix>,
}

pub fn hashed_features(
    spec: &HashedFeatureSpec,
    train: &[LabeledUtterance],
    val: &[LabeledUtterance],
    test: &[LabeledUtterance],
    par: Parallelism,
) -> SplitFeatures {
    SplitFeatures {
        train: hash_corpus(train, spec, par),
        val: hash_corpus(val, spec, par),
        test: hash_corpus(test, spec, par),
    }
}

/// Loads `train.nsde`, `val.nsde` and `test.nsde` from `dir`, checked
/// against the given splits.
pub fn load_features(
    dir: &Path,
    train: &[LabeledUtterance],
    val: &[LabeledUtterance],
    test: &[LabeledUtterance],
) -> Result<SplitFeatures, FeatureError> {
    Ok(SplitFeatures {
        train: load_embeddings(&dir.join("train.nsde"), train)?,
        val: load_embeddings(&dir.join("val.nsde"), val)?,
        test: load_embeddings(&dir.join("test.nsde"), test)?,
    })
}

fn tagger_objective(o: DetectObjective) -> Objective {
    match o {
        DetectObjective::Binary => Objective::Binary,
        _ => Objective::Multiple,
    }
}

/// Everything trained for one benchmark.
pub struct TrainedModels {
    pub multiple: TaggerModel,
    pub multiple_report: TrainingReport,
    pub binary: Option<(TaggerModel, TrainingReport)>,
    pub gda: BTreeMap<Objective, GdaModel>,
}

/// Trains the taggers and fits the GDA models the detector grid needs.
pub fn train_models(
    bench: &NsdBenchmark,
    feats: &SplitFeatures,
    detectors: &[DetectorSpec],
    train_cfg: &TrainConfig,
    gda: &GdaSettings,
) -> Result<TrainedModels, String> {
    let schema = &bench.in_domain_schema;
    let tr = &bench.train.utterances;
    let va = &bench.val.utterances;
    let (multiple, multiple_report) = crf::train(
        Objective::Multiple,
        schema,
        tr,
        &feats.train,
        va,
        &feats.val,
        train_cfg,
    )
    .map_err(|e| format!("training multiple tagger: {e}"))?;
    let binary = if detectors.iter().any(DetectorSpec::needs_binary_tagger) {
        Some(
            crf::train(
                Objective::Binary,
                schema,
                tr,
                &feats.train,
                va,
                &feats.val,
                train_cfg,
            )
            .map_err(|e| format!("training binary tagger: {e}"))?,
        )
    } else {
        None
    };
    let mut gda_models = BTreeMap::new();
    for d in detectors.iter().filter(|d| d.method == Method::Gda) {
        let obj = tagger_objective(d.objective);
        if gda_models.contains_key(&obj) {
            continue;
        }
        let g = fit_gda_for_objective(obj, schema, tr, &feats.train, gda.ridge, gda.metric)
            .map_err(|e| format!("fitting GDA ({obj}): {e}"))?;
        gda_models.insert(obj, g);
    }
    Ok(TrainedModels {
        multiple,
        multiple_report,
        binary,
        gda: gda_models,
    })
}

/// Calibrates `spec` on val, predicts test and scores it.
pub fn evaluate_detector(
    spec: DetectorSpec,
    models: &TrainedModels,
    bench: &NsdBenchmark,
    feats: &SplitFeatures,
    open_vocab: &[String],
    par: Parallelism,
) -> Result<(CalibratedDetector, PredictionSet, MetricsReport), String> {
    let dm = DetectorModels {
        multiple: &models.multiple,
        binary: models.binary.as_ref().map(|b| &b.0),
        gda: models.gda.get(&tagger_objective(spec.objective)),
    };
    let val_scores = score_utterances(dm, &feats.val, &spec, par).map_err(|e| e.to_string())?;
    let cal = calibrate_detector(spec, &val_scores, &bench.val.utterances)
        .map_err(|e| format!("calibrating {spec}: {e}"))?;
    let test_scores = score_utterances(dm, &feats.test, &spec, par).map_err(|e| e.to_string())?;
    let masks = apply_thresholds(&test_scores, &cal.config);
    let preds =
        PredictionSet::from_masks(test_scores.into_iter().map(|s| s.ind_tags).collect(), masks)
            .map_err(|e| e.to_string())?;
    let gold: Vec<&[Tag]> = bench
        .test
        .utterances
        .iter()
        .map(|u| u.tags.as_slice())
        .collect();
    let report = evaluate(&preds.final_tags(), &gold, open_vocab).map_err(|e| e.to_string())?;
    Ok((cal, preds, report))
}

/// Thresholds found on val, without the full sweep curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub config: crate::detect::DetectorConfig,
    pub val_token_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_binary_token_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum DetectorOutcome {
    Completed {
        calibration: CalibrationSummary,
        metrics: Box<MetricsReport>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub detector: String,
    #[serde(flatten)]
    pub outcome: DetectorOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub unknown_types: Vec<String>,
    pub benchmark: BenchmarkStats,
    pub multiple_training: TrainingReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_training: Option<TrainingReport>,
    pub detectors: Vec<DetectorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Completed(Box<CellResult>),
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub selection: String,
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<MeanStd, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::AllSeedsFailed);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub selection: String,
    pub strategy: Strategy,
    pub detector: String,
    pub completed: usize,
    pub failures: Vec<SeedFailure>,
    /// Empty when every seed failed.
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub toolkit_version: String,
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateRow>,
}

pub fn selection_label(s: &UnknownSelection) -> String {
    match s {
        UnknownSelection::Proportion(p) => format!("p={p}"),
        UnknownSelection::Explicit(types) => format!("unknown={}", types.join("+")),
    }
}

/// Flat scalar metrics of one scored detector, keyed by name.
pub fn scalar_metrics(cell: &CellResult, m: &MetricsReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    out.insert("ind_span_f1".into(), m.ind_span.f1);
    out.insert("nsd_span_f1".into(), m.nsd_span.f1);
    out.insert("nsd_token_f1".into(), m.nsd_token.f1);
    out.insert("nsd_token_precision".into(), m.nsd_token.precision);
    out.insert("nsd_token_recall".into(), m.nsd_token.recall);
    for (p, r) in ROSE_LEVELS.iter().zip(&m.rose) {
        out.insert(format!("rose_{}", (p * 100.0).round() as u32), r.reported);
    }
    out.insert("rose_mean".into(), m.rose_mean);
    out.insert(
        "removed_train_pct".into(),
        100.0 * cell.benchmark.removed_train_fraction,
    );
    out.insert(
        "test_unknown_value_pct".into(),
        cell.benchmark.test_unknown_value_share(),
    );
    out.insert("test_oov_pct".into(), cell.benchmark.oov_word_percentage);
    out
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    splits: &'a CorpusSplits,
    schema: &'a SlotSchema,
    file_features: Option<&'a SplitFeatures>,
}

fn touches(u: &LabeledUtterance, unknown: &BTreeSet<String>) -> bool {
    u.tags
        .iter()
        .any(|t| t.slot_type().is_some_and(|s| unknown.contains(s)))
}

fn run_cell(
    ctx: &Context<'_>,
    selection: &UnknownSelection,
    strategy: Strategy,
    seed: u64,
) -> Result<CellResult, String> {
    let cfg = ctx.cfg;
    let bench = build_benchmark(
        ctx.splits,
        ctx.schema,
        &NsdConfig {
            selection: selection.clone(),
            strategy,
            seed,
        },
    )
    .map_err(|e| format!("building benchmark: {e}"))?;
    let feats = match (&cfg.features, ctx.file_features) {
        (FeatureSource::Hashed(spec), _) => hashed_features(
            spec,
            &bench.train.utterances,
            &bench.val.utterances,
            &bench.test.utterances,
            cfg.parallelism,
        ),
        (FeatureSource::File { .. }, Some(all)) => {
            let keep = |i: usize| {
                strategy != Strategy::Remove
                    || !touches(&ctx.splits.train.utterances[i], &bench.unknown_types)
            };
            let train: Vec<TokenFeatureMatrix> = all
                .train
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, x)| x.clone())
                .collect();
            SplitFeatures {
                train,
                val: all.val.clone(),
                test: all.test.clone(),
            }
        }
        (FeatureSource::File { .. }, None) => unreachable!("file features are loaded up front"),
    };
    let train_cfg = cfg.train.to_config(&cfg.features, seed, cfg.parallelism);
    let models = train_models(&bench, &feats, &cfg.detectors, &train_cfg, &cfg.gda)?;
    let detectors = cfg
        .detectors
        .iter()
        .map(|&spec| {
            let outcome = match evaluate_detector(
                spec,
                &models,
                &bench,
                &feats,
                &cfg.open_vocab,
                cfg.parallelism,
            ) {
                Ok((cal, _, metrics)) => DetectorOutcome::Completed {
                    calibration: CalibrationSummary {
                        config: cal.config,
                        val_token_f1: cal.calibration.token_f1,
                        val_binary_token_f1: cal.binary_calibration.map(|c| c.token_f1),
                    },
                    metrics: Box::new(metrics),
                },
                Err(error) => DetectorOutcome::Failed { error },
            };
            DetectorRecord {
                detector: spec.to_string(),
                outcome,
            }
        })
        .collect();
    Ok(CellResult {
        unknown_types: bench.unknown_types.iter().cloned().collect(),
        benchmark: benchmark_stats(&bench, cfg.case_policy),
        multiple_training: models.multiple_report,
        binary_training: models.binary.map(|b| b.1),
        detectors,
    })
}

fn aggregate_rows(cfg: &ExperimentConfig, cells: &[CellRecord]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for selection in &cfg.selections {
        let label = selection_label(selection);
        for &strategy in &cfg.strategies {
            for spec in &cfg.detectors {
                let name = spec.to_string();
                let mut failures = Vec::new();
                let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for c in cells
                    .iter()
                    .filter(|c| c.selection == label && c.strategy == strategy)
                {
                    let result = match &c.outcome {
                        CellOutcome::Completed(r) => r,
                        CellOutcome::Failed { error } => {
                            failures.push(SeedFailure {
                                seed: c.seed,
                                error: error.clone(),
                            });
                            continue;
                        }
                    };
                    match result
                        .detectors
                        .iter()
                        .find(|d| d.detector == name)
                        .map(|d| &d.outcome)
                    {
                        Some(DetectorOutcome::Completed { metrics, .. }) => {
                            for (k, v) in scalar_metrics(result, metrics) {
                                samples.entry(k).or_default().push(v);
                            }
                        }
                        Some(DetectorOutcome::Failed { error }) => failures.push(SeedFailure {
                            seed: c.seed,
                            error: error.clone(),
                        }),
                        None => {}
                    }
                }
                let metrics: BTreeMap<String, MeanStd> = samples
                    .into_iter()
                    .filter_map(|(k, v)| aggregate(&v).ok().map(|a| (k, a)))
                    .collect();
                rows.push(AggregateRow {
                    selection: label.clone(),
                    strategy,
                    detector: name,
                    completed: metrics.values().next().map_or(0, |m| m.n),
                    failures,
                    metrics,
                });
            }
        }
    }
    rows
}

/// Runs every (selection, strategy, seed) cell. A failing cell or detector
/// is recorded with its error and left out of the aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let splits = cfg.corpus.load()?;
    let schema = derive_schema(&splits.train);
    let file_features = match &cfg.features {
        FeatureSource::File { path } => Some(load_features(
            path,
            &splits.train.utterances,
            &splits.val.utterances,
            &splits.test.utterances,
        )?),
        FeatureSource::Hashed(_) => None,
    };
    let ctx = Context {
        cfg,
        splits: &splits,
        schema: &schema,
        file_features: file_features.as_ref(),
    };
    let mut grid = Vec::new();
    for selection in &cfg.selections {
        for &strategy in &cfg.strategies {
            for &seed in &cfg.seeds {
                grid.push((selection, strategy, seed));
            }
        }
    }
    let cells = cfg
        .parallelism
        .map(&grid, |&(selection, strategy, seed)| CellRecord {
            selection: selection_label(selection),
            strategy,
            seed,
            outcome: match run_cell(&ctx, selection, strategy, seed) {
                Ok(r) => CellOutcome::Completed(Box::new(r)),
                Err(error) => CellOutcome::Failed { error },
            },
        });
    let aggregates = aggregate_rows(cfg, &cells);
    Ok(RunReport {
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        cells,
        aggregates,
    })
}

pub fn report_json(report: &RunReport) -> Result<Vec<u8>, ExperimentError> {
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}

/// One row per (config point, detector, metric).
pub fn report_csv(report: &RunReport) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "selection",
        "strategy",
        "detector",
        "metric",
        "mean",
        "std",
        "completed",
        "failed",
    ])?;
    for row in &report.aggregates {
        for (metric, v) in &row.metrics {
            w.write_record([
                row.selection.clone(),
                row.strategy.to_string(),
                row.detector.clone(),
                metric.clone(),
                v.mean.to_string(),
                v.std.to_string(),
                row.completed.to_string(),
                row.failures.len().to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| ExperimentError::Io {
        path: PathBuf::from("report.csv"),
        source: e.into_error(),
    })
}

/// Writes `files` under `dir`. Refuses to replace existing files unless
/// `force` is set.
pub fn write_outputs(
    dir: &Path,
    files: &[(&str, Vec<u8>)],
    force: bool,
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths: Vec<PathBuf> = files.iter().map(|(name, _)| dir.join(name)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(ExperimentError::OutputExists(p.clone()));
        }
    }
    for (p, (_, bytes)) in paths.iter().zip(files) {
        fs::write(p, bytes).map_err(io_err(p))?;
    }
    Ok(paths)
}

/// Writes `report.json` and `report.csv` to the configured output directory.
pub fn write_report(report: &RunReport, force: bool) -> Result<Vec<PathBuf>, ExperimentError> {
    write_outputs(
        &report.config.output_dir,
        &[
            ("report.json", report_json(report)?),
            ("report.csv", report_csv(report)?),
        ],
        force,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[50.0, 60.0]).unwrap();
        assert_eq!((a.mean, a.std, a.n), (55.0, 5.0, 2));
        let a = aggregate(&[42.0]).unwrap();
        assert_eq!((a.mean, a.std), (42.0, 0.0));
        assert!(matches!(
            aggregate(&[]),
            Err(ExperimentError::AllSeedsFailed)
        ));
    }

    #[test]
    fn config_defaults_from_minimal_json() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"corpus": {"synthetic": {"train": 10, "val": 5, "test": 5, "seed": 1}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seeds.len(), 10);
        assert_eq!(cfg.detectors[0].to_string(), "gda:multiple:minimum");
        assert_eq!(cfg.strategies, vec![Strategy::Remove]);
        let back: ExperimentConfig =
            serde_json::from_slice(&serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::new(CorpusSource::Synthetic(SyntheticConfig::default()));
        cfg.validate().unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1];
        cfg.corpus = CorpusSource::Dir("/nonexistent/corpus".into());
        assert!(cfg.validate().is_err());
        assert_eq!(ExperimentConfig::seed_range(7, 3), vec![7, 8, 9]);
    }

    #[test]
    fn refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &[("a.txt", b"one".to_vec())], false).unwrap();
        assert!(matches!(
            write_outputs(dir.path(), &[("a.txt", b"two".to_vec())], false),
            Err(ExperimentError::OutputExists(_))
        ));
        write_outputs(dir.path(), &[("a.txt", b"two".to_vec())], true).unwrap();
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"two");
    }

    #[test]
    fn loads_both_directory_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("train.conll"), "play O\njazz B-genre\n\n").unwrap();
        fs::create_dir(p.join("valid")).unwrap();
        fs::write(p.join("valid/seq.in"), "play rock\n").unwrap();
        fs::write(p.join("valid/seq.out"), "O B-genre\n").unwrap();
        let err = load_corpus_dir(p).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::MissingSplit { split: "test", .. }
        ));
        fs::write(p.join("test.conll"), "play O\npop B-genre\n").unwrap();
        let c = load_corpus_dir(p).unwrap();
        assert_eq!((c.train.len(), c.val.len(), c.test.len()), (1, 1, 1));
        assert_eq!(c.val.utterances[0].tokens, vec!["play", "rock"]);
    }
}
