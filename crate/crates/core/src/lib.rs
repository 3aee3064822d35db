//! Novel slot detection (NSD) toolkit.
//!
//! The crate turns an ordinary BIO slot-filling corpus into an NSD benchmark
//! (some slot types held out as unknown), trains linear-chain CRF taggers on
//! the in-domain part, flags novel-slot tokens with MSP or GDA detectors and
//! scores the result with token, span and ROSE metrics.
//!
//! Data-parallel loops (batch gradients, marginals, distance scoring, seeds)
//! go through [`exec::Parallelism`]. With the `parallel` feature (default)
//! they run on rayon; without it every call falls back to a sequential loop
//! producing bit-identical results.

pub mod benchmark;
pub mod corpus;
pub mod crf;
pub mod detect;
pub mod exec;
pub mod experiment;
pub mod features;
pub mod metrics;
pub mod synthetic;

mod float_serde;

pub use benchmark::{
    build_benchmark, BenchmarkError, BenchmarkStats, NsdBenchmark, NsdConfig, Strategy,
    UnknownSelection,
};
pub use corpus::{
    compute_stats, derive_schema, parse_conll, CasePolicy, CorpusError, CorpusSplit, CorpusSplits,
    CorpusStats, LabeledUtterance, SlotSchema, SplitName, Tag,
};
pub use crf::{Objective, TaggerModel, TrainConfig};
pub use detect::{DetectorConfig, GdaModel, PredictionSet};
pub use exec::Parallelism;
pub use features::{FeatureSource, HashedFeatureSpec, TokenFeatureMatrix};
pub use metrics::MetricsReport;

/// Version of the toolkit as reported by `nsd --version`.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
