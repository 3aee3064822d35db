//! On-disk layout of benchmark directories and trained models.
//!
//! A benchmark directory holds `train.conll`, `val.conll`, `test.conll` and
//! `benchmark.json`. Trained taggers sit next to them as
//! `model-<objective>.nsdm` with a `model-<objective>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nsd_core::benchmark::{BenchmarkStats, SplitCounts};
use nsd_core::corpus::{parse_conll, to_conll, CorpusSplit, SplitName};
use nsd_core::crf::{TrainingReport, NSDM_VERSION};
use nsd_core::experiment::write_outputs;
use nsd_core::{
    FeatureSource, NsdBenchmark, NsdConfig, Objective, SlotSchema, TaggerModel, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub config: NsdConfig,
    pub unknown_types: Vec<String>,
    pub in_domain_types: Vec<String>,
    pub all_types: Vec<String>,
    pub original_train_size: usize,
    pub original_unknown_values: SplitCounts,
    pub original_slot_values: SplitCounts,
    pub stats: BenchmarkStats,
}

pub fn save_benchmark(
    dir: &Path,
    b: &NsdBenchmark,
    stats: BenchmarkStats,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let manifest = Manifest {
        toolkit_version: nsd_core::TOOLKIT_VERSION.into(),
        config: b.config.clone(),
        unknown_types: b.unknown_types.iter().cloned().collect(),
        in_domain_types: b.in_domain_schema.slot_types().to_vec(),
        all_types: b.full_schema.slot_types().to_vec(),
        original_train_size: b.original_train_size,
        original_unknown_values: b.original_unknown_values,
        original_slot_values: b.original_slot_values,
        stats,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok(write_outputs(
        dir,
        &[
            ("train.conll", to_conll(&b.train.utterances).into_bytes()),
            ("val.conll", to_conll(&b.val.utterances).into_bytes()),
            ("test.conll", to_conll(&b.test.utterances).into_bytes()),
            ("benchmark.json", json),
        ],
        force,
    )?)
}

fn read_split(dir: &Path, name: SplitName) -> Result<CorpusSplit> {
    let path = dir.join(format!("{name}.conll"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let utts = parse_conll(&text).with_context(|| format!("parsing {}", path.display()))?;
    CorpusSplit::new(name, utts).with_context(|| format!("validating {}", path.display()))
}

pub fn load_benchmark(dir: &Path) -> Result<NsdBenchmark> {
    let path = dir.join("benchmark.json");
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "reading {} (is this a benchmark directory?)",
            path.display()
        )
    })?;
    let m: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(NsdBenchmark {
        train: read_split(dir, SplitName::Train)?,
        val: read_split(dir, SplitName::Val)?,
        test: read_split(dir, SplitName::Test)?,
        unknown_types: m.unknown_types.into_iter().collect(),
        in_domain_schema: SlotSchema::from_types(m.in_domain_types),
        full_schema: SlotSchema::from_types(m.all_types),
        config: m.config,
        original_train_size: m.original_train_size,
        original_unknown_values: m.original_unknown_values,
        original_slot_values: m.original_slot_values,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub toolkit_version: String,
    pub format_version: u32,
    pub objective: Objective,
    pub labels: Vec<String>,
    pub dim: usize,
    pub features: FeatureSource,
    pub train_config: TrainConfig,
    pub training: TrainingReport,
}

pub fn model_paths(dir: &Path, objective: Objective) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("model-{objective}.nsdm")),
        dir.join(format!("model-{objective}.json")),
    )
}

pub fn save_model(
    dir: &Path,
    model: &TaggerModel,
    meta: &ModelMeta,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let mut blob = Vec::new();
    model.write_nsdm(&mut blob)?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    let (bin, side) = model_paths(dir, model.objective);
    let names = [
        bin.file_name().unwrap().to_string_lossy().into_owned(),
        side.file_name().unwrap().to_string_lossy().into_owned(),
    ];
    Ok(write_outputs(
        dir,
        &[(&names[0], blob), (&names[1], json)],
        force,
    )?)
}

pub fn load_model(dir: &Path, objective: Objective) -> Result<(TaggerModel, ModelMeta)> {
    let (bin, side) = model_paths(dir, objective);
    if !bin.is_file() {
        bail!(
            "{} not found; run `nsd train --benchmark {} --objective {objective}` first",
            bin.display(),
            dir.display()
        );
    }
    let meta: ModelMeta = serde_json::from_slice(
        &fs::read(&side).with_context(|| format!("reading {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    if meta.format_version != NSDM_VERSION {
        bail!(
            "{} has format version {}, expected {NSDM_VERSION}",
            side.display(),
            meta.format_version
        );
    }
    let f = fs::File::open(&bin).with_context(|| format!("opening {}", bin.display()))?;
    let model = TaggerModel::read_nsdm(std::io::BufReader::new(f), meta.labels.clone())
        .with_context(|| format!("reading {}", bin.display()))?;
    if model.objective != objective {
        bail!("{} holds a {} model", bin.display(), model.objective);
    }
    Ok((model, meta))
}
