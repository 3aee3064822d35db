mod store;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nsd_core::benchmark::benchmark_stats;
use nsd_core::corpus::{to_conll, LabeledUtterance, Tag};
use nsd_core::crf::{self, NSDM_VERSION};
use nsd_core::detect::{
    calibrate_detector, fit_gda_for_objective, run_detection, score_utterances, DetectObjective,
    DetectorModels, DetectorSpec, DistanceMetric, DistanceStrategy, Method,
};
use nsd_core::experiment::{
    hashed_features, load_corpus_dir, load_features, run_experiment, write_outputs, write_report,
    CorpusSource, ExperimentConfig, SplitFeatures, TrainSettings, REPORT_FORMAT_VERSION,
};
use nsd_core::features::NSDE_VERSION;
use nsd_core::metrics::{evaluate, parse_predictions, write_predictions, PredictedUtterance};
use nsd_core::synthetic::{self, SyntheticConfig};
use nsd_core::{
    build_benchmark, compute_stats, derive_schema, parse_conll, CasePolicy, CorpusSplits,
    DetectorConfig, FeatureSource, NsdBenchmark, NsdConfig, Objective, Parallelism, Strategy,
    UnknownSelection,
};

fn long_version() -> &'static str {
    Box::leak(
        format!(
            "{}\nNSDM format {NSDM_VERSION}\nNSDE format {NSDE_VERSION}\nreport format {REPORT_FORMAT_VERSION}",
            nsd_core::TOOLKIT_VERSION
        )
        .into_boxed_str(),
    )
}

#[derive(Parser)]
#[command(name = "nsd", about = "Novel slot detection toolkit", version = nsd_core::TOOLKIT_VERSION, long_version = long_version())]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Build an NSD benchmark directory from a corpus.
    Build(BuildArgs),
    /// Train a CRF tagger on a benchmark directory.
    Train(TrainArgs),
    /// Detect novel slots on the test split of a benchmark directory.
    Detect(DetectArgs),
    /// Score a prediction file.
    Eval(EvalArgs),
    /// Run a full experiment grid and write report.json and report.csv.
    Run(RunArgs),
    /// Print the NSD error table of a prediction file.
    Analyze(AnalyzeArgs),
    /// Write a synthetic corpus in CoNLL format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory with train/val/test CoNLL files or seq.in/seq.out folders.
    #[arg(long, conflicts_with_all = ["train", "val", "test"])]
    corpus: Option<PathBuf>,
    #[arg(long, requires_all = ["val", "test"])]
    train: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "test"])]
    val: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "val"])]
    test: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self) -> Result<CorpusSplits> {
        if let Some(dir) = &self.corpus {
            return Ok(load_corpus_dir(dir)?);
        }
        let (Some(tr), Some(va), Some(te)) = (&self.train, &self.val, &self.test) else {
            bail!("give either --corpus DIR or all of --train, --val and --test");
        };
        let read = |p: &Path| -> Result<Vec<LabeledUtterance>> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_conll(&text).with_context(|| format!("parsing {}", p.display()))
        };
        Ok(CorpusSplits::new(read(tr)?, read(va)?, read(te)?)?)
    }
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Count vocabulary with tokens taken verbatim.
    #[arg(long)]
    no_lowercase: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Fraction of slot types drawn as unknown.
    #[arg(long, conflicts_with = "unknown_types")]
    proportion: Option<f64>,
    /// Comma-separated unknown slot types.
    #[arg(long, value_delimiter = ',')]
    unknown_types: Vec<String>,
    #[arg(long, default_value = "remove")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long, default_value = "multiple")]
    objective: Objective,
    /// `hashed:d=N[,seed=S]` or `file:DIR` with train/val/test.nsde.
    #[arg(long, default_value = "hashed:d=4096")]
    features: FeatureSource,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    objective: DetectObjective,
    /// GDA distance strategy.
    #[arg(long)]
    distance: Option<DistanceStrategy>,
    #[arg(long, allow_negative_numbers = true, conflicts_with = "calibrate")]
    threshold: Option<f64>,
    /// Binary-tagger threshold of `binary+multiple`.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "calibrate")]
    binary_threshold: Option<f64>,
    /// Pick thresholds by validation Token F1.
    #[arg(long)]
    calibrate: bool,
    #[arg(long, default_value = "mahalanobis")]
    metric: DistanceMetric,
    /// Covariance ridge; defaults to 1e-3 times the mean variance.
    #[arg(long)]
    ridge: Option<f64>,
    /// Output directory; defaults to the benchmark directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// `token gold pred` file, or `token pred` when --gold is given.
    #[arg(long)]
    pred: PathBuf,
    /// CoNLL file whose tags replace the gold column.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    open_vocab: Vec<String>,
    /// Print only the JSON report.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    open_vocab: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with ExperimentConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Use the built-in synthetic corpus with this seed.
    #[arg(long)]
    synthetic: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    proportions: Vec<f64>,
    /// Explicit unknown set; repeat the flag for several sets.
    #[arg(long)]
    unknown_types: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    detectors: Vec<DetectorSpec>,
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["base_seed", "runs"])]
    seeds: Vec<u64>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    features: Option<FeatureSource>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    metric: Option<DistanceMetric>,
    #[arg(long, value_delimiter = ',')]
    open_vocab: Vec<String>,
    #[arg(long)]
    no_lowercase: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticConfig::default().train)]
    train_size: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().val)]
    val_size: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().test)]
    test_size: usize,
    #[arg(long)]
    force: bool,
}

fn case_policy(no_lowercase: bool) -> CasePolicy {
    if no_lowercase {
        CasePolicy::Verbatim
    } else {
        CasePolicy::Lowercase
    }
}

/// Write to stdout; a closed pipe surfaces as an io error instead of a panic.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let splits = a.corpus.load()?;
    print_json(&compute_stats(&splits, case_policy(a.no_lowercase)))
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let splits = a.corpus.load()?;
    let selection = match (a.proportion, a.unknown_types.is_empty()) {
        (Some(p), true) => UnknownSelection::Proportion(p),
        (None, false) => UnknownSelection::Explicit(a.unknown_types),
        (None, true) => UnknownSelection::Proportion(0.15),
        (Some(_), false) => unreachable!("clap rejects both"),
    };
    let cfg = NsdConfig {
        selection,
        strategy: a.strategy,
        seed: a.seed,
    };
    let bench = build_benchmark(&splits, &derive_schema(&splits.train), &cfg)?;
    let stats = benchmark_stats(&bench, case_policy(a.no_lowercase));
    let written = store::save_benchmark(&a.out, &bench, stats, a.force)?;
    eprintln!(
        "unknown types: {}",
        bench
            .unknown_types
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ")
    );
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn benchmark_features(
    bench: &NsdBenchmark,
    source: &FeatureSource,
    par: Parallelism,
) -> Result<SplitFeatures> {
    Ok(match source {
        FeatureSource::Hashed(spec) => hashed_features(
            spec,
            &bench.train.utterances,
            &bench.val.utterances,
            &bench.test.utterances,
            par,
        ),
        FeatureSource::File { path } => load_features(
            path,
            &bench.train.utterances,
            &bench.val.utterances,
            &bench.test.utterances,
        )
        .with_context(|| format!("loading features from {}", path.display()))?,
    })
}

fn cmd_train(a: TrainArgs, par: Parallelism) -> Result<()> {
    let bench = store::load_benchmark(&a.benchmark)?;
    let feats = benchmark_features(&bench, &a.features, par)?;
    let d = TrainSettings::default();
    let settings = TrainSettings {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
        patience: a.patience.unwrap_or(d.patience),
        l2: a.l2.unwrap_or(d.l2),
    };
    let cfg = settings.to_config(&a.features, a.seed, par);
    let (model, report) = crf::train(
        a.objective,
        &bench.in_domain_schema,
        &bench.train.utterances,
        &feats.train,
        &bench.val.utterances,
        &feats.val,
        &cfg,
    )?;
    eprintln!(
        "{} tagger: best val span F1 {:.2} at epoch {} of {}",
        a.objective, report.best_val_span_f1, report.best_epoch, report.epochs_run
    );
    let meta = store::ModelMeta {
        toolkit_version: nsd_core::TOOLKIT_VERSION.into(),
        format_version: NSDM_VERSION,
        objective: a.objective,
        labels: model.labels.clone(),
        dim: model.dim,
        features: a.features,
        train_config: cfg,
        training: report,
    };
    for p in store::save_model(&a.benchmark, &model, &meta, a.force)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct DetectorFile<'a> {
    toolkit_version: &'a str,
    config: DetectorConfig,
    features: &'a FeatureSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<&'a nsd_core::detect::CalibratedDetector>,
}

fn cmd_detect(a: DetectArgs, par: Parallelism) -> Result<()> {
    let spec = DetectorSpec {
        method: a.method,
        objective: a.objective,
        distance: a.distance,
    };
    spec.validate()?;
    let bench = store::load_benchmark(&a.benchmark)?;
    let (multiple, meta) = store::load_model(&a.benchmark, Objective::Multiple)?;
    let binary = if spec.needs_binary_tagger() {
        let (b, bmeta) = store::load_model(&a.benchmark, Objective::Binary)?;
        if bmeta.features != meta.features {
            bail!("binary and multiple taggers were trained on different features");
        }
        Some(b)
    } else {
        None
    };
    let feats = benchmark_features(&bench, &meta.features, par)?;
    let gda = match spec.method {
        Method::Gda => {
            let obj = match spec.objective {
                DetectObjective::Binary => Objective::Binary,
                _ => Objective::Multiple,
            };
            Some(fit_gda_for_objective(
                obj,
                &bench.in_domain_schema,
                &bench.train.utterances,
                &feats.train,
                a.ridge,
                a.metric,
            )?)
        }
        Method::Msp => None,
    };
    let models = DetectorModels {
        multiple: &multiple,
        binary: binary.as_ref(),
        gda: gda.as_ref(),
    };
    let (config, calibration) = if a.calibrate {
        let val_scores = score_utterances(models, &feats.val, &spec, par)?;
        let cal = calibrate_detector(spec, &val_scores, &bench.val.utterances)?;
        (cal.config, Some(cal))
    } else {
        let threshold = a
            .threshold
            .ok_or_else(|| anyhow!("give --threshold or --calibrate"))?;
        let cfg = DetectorConfig {
            spec,
            threshold,
            binary_threshold: a.binary_threshold,
        };
        cfg.validate()?;
        (cfg, None)
    };
    let preds = run_detection(models, &feats.test, &config, par)?;
    let rows: Vec<PredictedUtterance> = bench
        .test
        .utterances
        .iter()
        .zip(&preds.utterances)
        .map(|(u, p)| PredictedUtterance {
            tokens: u.tokens.clone(),
            gold: u.tags.clone(),
            pred: p.final_tags.clone(),
        })
        .collect();
    let mut json = serde_json::to_vec_pretty(&DetectorFile {
        toolkit_version: nsd_core::TOOLKIT_VERSION,
        config,
        features: &meta.features,
        calibration: calibration.as_ref(),
    })?;
    json.push(b'\n');
    let out = a.out.unwrap_or(a.benchmark);
    let written = write_outputs(
        &out,
        &[
            ("predictions.txt", write_predictions(&rows).into_bytes()),
            ("detector.json", json),
        ],
        a.force,
    )?;
    if let Some(c) = &calibration {
        eprintln!(
            "calibrated threshold {} (val NSD token F1 {:.2})",
            c.config.threshold, c.calibration.token_f1
        );
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

type TagSeqs = Vec<Vec<Tag>>;

/// Predicted and gold tag sequences of a prediction file.
fn read_pred_pairs(pred: &Path, gold: Option<&Path>) -> Result<(TagSeqs, TagSeqs)> {
    let text = fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let Some(gold) = gold else {
        let utts =
            parse_predictions(&text).with_context(|| format!("parsing {}", pred.display()))?;
        return Ok(utts.into_iter().map(|u| (u.pred, u.gold)).unzip());
    };
    let columns = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map_or(0, |l| l.split_whitespace().count());
    let preds: Vec<(Vec<String>, Vec<Tag>)> = if columns == 3 {
        parse_predictions(&text)
            .with_context(|| format!("parsing {}", pred.display()))?
            .into_iter()
            .map(|u| (u.tokens, u.pred))
            .collect()
    } else {
        parse_conll(&text)
            .with_context(|| format!("parsing {}", pred.display()))?
            .into_iter()
            .map(|u| (u.tokens, u.tags))
            .collect()
    };
    let gtext = fs::read_to_string(gold).with_context(|| format!("reading {}", gold.display()))?;
    let golds = parse_conll(&gtext).with_context(|| format!("parsing {}", gold.display()))?;
    if golds.len() != preds.len() {
        bail!(
            "{} has {} utterances but {} has {}",
            pred.display(),
            preds.len(),
            gold.display(),
            golds.len()
        );
    }
    let mut p_out = Vec::with_capacity(preds.len());
    let mut g_out = Vec::with_capacity(preds.len());
    for (i, ((toks, p), g)) in preds.into_iter().zip(golds).enumerate() {
        if toks != g.tokens {
            bail!(
                "utterance {} differs between prediction and gold files",
                i + 1
            );
        }
        p_out.push(p);
        g_out.push(g.tags);
    }
    Ok((p_out, g_out))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (pred, gold) = read_pred_pairs(&a.pred, a.gold.as_deref())?;
    let report = evaluate(&pred, &gold, &a.open_vocab)?;
    print_json(&report)?;
    if !a.json {
        emit(&format!("\n{}", report.to_table()))?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let (pred, gold) = read_pred_pairs(&a.pred, a.gold.as_deref())?;
    let table = nsd_core::metrics::error_analysis(&pred, &gold, &a.open_vocab)?;
    emit(&table.to_table())?;
    if table.no_errors {
        emit("no NSD errors\n")?;
    }
    Ok(())
}

fn run_config(a: RunArgs, sequential: bool) -> Result<(ExperimentConfig, bool)> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<ExperimentConfig>(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => {
            let corpus = match (&a.corpus, a.synthetic) {
                (Some(dir), _) => CorpusSource::Dir(dir.clone()),
                (None, Some(seed)) => CorpusSource::Synthetic(SyntheticConfig {
                    seed,
                    ..SyntheticConfig::default()
                }),
                (None, None) => bail!("give --config, --corpus DIR or --synthetic SEED"),
            };
            ExperimentConfig::new(corpus)
        }
    };
    if let Some(dir) = a.corpus {
        cfg.corpus = CorpusSource::Dir(dir);
    }
    if let Some(seed) = a.synthetic {
        cfg.corpus = CorpusSource::Synthetic(SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        });
    }
    let mut selections: Vec<UnknownSelection> = a
        .proportions
        .into_iter()
        .map(UnknownSelection::Proportion)
        .collect();
    selections.extend(
        a.unknown_types.iter().map(|s| {
            UnknownSelection::Explicit(s.split(',').map(|t| t.trim().to_string()).collect())
        }),
    );
    if !selections.is_empty() {
        cfg.selections = selections;
    }
    if !a.strategies.is_empty() {
        cfg.strategies = a.strategies;
    }
    if !a.detectors.is_empty() {
        cfg.detectors = a.detectors;
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds;
    } else if a.base_seed.is_some() || a.runs.is_some() {
        cfg.seeds = ExperimentConfig::seed_range(a.base_seed.unwrap_or(0), a.runs.unwrap_or(10));
    }
    if let Some(f) = a.features {
        cfg.features = f;
    }
    if a.learning_rate.is_some() {
        cfg.train.learning_rate = a.learning_rate;
    }
    if let Some(n) = a.max_epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(n) = a.patience {
        cfg.train.patience = n;
    }
    if a.ridge.is_some() {
        cfg.gda.ridge = a.ridge;
    }
    if let Some(m) = a.metric {
        cfg.gda.metric = m;
    }
    if !a.open_vocab.is_empty() {
        cfg.open_vocab = a.open_vocab;
    }
    if a.no_lowercase {
        cfg.case_policy = CasePolicy::Verbatim;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if sequential {
        cfg.parallelism = Parallelism::Sequential;
    }
    cfg.validate()?;
    Ok((cfg, a.force))
}

fn cmd_run(a: RunArgs, sequential: bool) -> Result<()> {
    let (cfg, force) = run_config(a, sequential)?;
    let target = cfg.output_dir.join("report.json");
    if !force && target.exists() {
        bail!("{} exists; pass --force to overwrite", target.display());
    }
    let report = run_experiment(&cfg)?;
    for row in &report.aggregates {
        let f1 = row
            .metrics
            .get("nsd_token_f1")
            .map_or("n/a".to_string(), |m| {
                format!("{:.2} ± {:.2}", m.mean, m.std)
            });
        eprintln!(
            "{} {} {}: NSD token F1 {} over {} seeds, {} failures",
            row.selection,
            row.strategy,
            row.detector,
            f1,
            row.completed,
            row.failures.len()
        );
    }
    for p in write_report(&report, force)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let splits = synthetic::generate(&SyntheticConfig {
        train: a.train_size,
        val: a.val_size,
        test: a.test_size,
        seed: a.seed,
    });
    let written = write_outputs(
        &a.out,
        &[
            (
                "train.conll",
                to_conll(&splits.train.utterances).into_bytes(),
            ),
            ("valid.conll", to_conll(&splits.val.utterances).into_bytes()),
            ("test.conll", to_conll(&splits.test.utterances).into_bytes()),
        ],
        a.force,
    )?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let par = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let result = match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Build(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a, par),
        Command::Detect(a) => cmd_detect(a, par),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a, cli.sequential),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
    };
    // A reader such as `head` closing early is not a failure.
    match result {
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            Ok(())
        }
        r => r,
    }
}
