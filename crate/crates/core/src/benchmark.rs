//! NSD benchmark construction: unknown-type selection, train-split
//! strategies (Replace / Mask / Remove) and NS relabeling of val/test.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    oov_percentage, vocabulary, CasePolicy, CorpusSplit, CorpusSplits, LabeledUtterance,
    SlotSchema, SplitName, Tag,
};
use crate::metrics::extract_spans;

/// Token substituted for unknown-slot words under [`Strategy::Mask`].
pub const MASK_TOKEN: &str = "MASK";

#[derive(Debug, Error, PartialEq)]
pub enum BenchmarkError {
    #[error("schema has no slot types to hold out")]
    DegenerateSchema,
    #[error("proportion must lie strictly between 0 and 1, got {0}")]
    InvalidProportion(f64),
    #[error("unknown slot type {0:?} is not part of the schema")]
    NotInSchema(String),
    #[error("explicit unknown slot list is empty")]
    EmptyUnknownSet,
    #[error("the Remove strategy deleted every train utterance")]
    AllTrainRemoved,
    #[error("{split} split already contains the reserved token {MASK_TOKEN:?}")]
    ReservedToken { split: SplitName },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Relabel unknown-slot tokens as `O`, keep the words.
    Replace,
    /// Relabel as `O` and replace each word with `MASK`.
    Mask,
    /// Drop every utterance that contains an unknown slot.
    Remove,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "replace" => Ok(Strategy::Replace),
            "mask" => Ok(Strategy::Mask),
            "remove" => Ok(Strategy::Remove),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Replace => "replace",
            Strategy::Mask => "mask",
            Strategy::Remove => "remove",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownSelection {
    /// Fraction of slot types drawn as unknown.
    Proportion(f64),
    /// Fixed set of unknown slot types.
    Explicit(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsdConfig {
    pub selection: UnknownSelection,
    pub strategy: Strategy,
    pub seed: u64,
}

impl NsdConfig {
    pub fn validate(&self, schema: &SlotSchema) -> Result<(), BenchmarkError> {
        match &self.selection {
            UnknownSelection::Proportion(p) => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(BenchmarkError::InvalidProportion(*p));
                }
            }
            UnknownSelection::Explicit(types) => {
                if types.is_empty() {
                    return Err(BenchmarkError::EmptyUnknownSet);
                }
                if let Some(t) = types.iter().find(|t| !schema.contains(t)) {
                    return Err(BenchmarkError::NotInSchema(t.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Number of gold spans (slot values) per slot type.
pub fn span_counts_by_type(utterances: &[LabeledUtterance]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for u in utterances {
        for s in extract_spans(&u.tags) {
            *counts.entry(s.label).or_insert(0) += 1;
        }
    }
    counts
}

/// `max(1, round(proportion * n))`, capped at `n`.
pub fn unknown_count(proportion: f64, n: usize) -> usize {
    ((proportion * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Draws unknown slot types without replacement, each draw proportional to
/// the type's span count in `train` among the types still available.
pub fn select_unknown_types<R: Rng + ?Sized>(
    schema: &SlotSchema,
    train: &CorpusSplit,
    proportion: f64,
    rng: &mut R,
) -> Result<BTreeSet<String>, BenchmarkError> {
    if schema.is_empty() {
        return Err(BenchmarkError::DegenerateSchema);
    }
    if !(proportion > 0.0 && proportion < 1.0) {
        return Err(BenchmarkError::InvalidProportion(proportion));
    }
    let counts = span_counts_by_type(&train.utterances);
    let mut pool: Vec<(&String, f64)> = schema
        .slot_types()
        .iter()
        .map(|t| (t, counts.get(t).copied().unwrap_or(0) as f64))
        .collect();
    let k = unknown_count(proportion, pool.len());
    let mut chosen = BTreeSet::new();
    for _ in 0..k {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // Float slack at the upper end lands on the last positive weight.
            while pool[pick].1 <= 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..pool.len())
        };
        chosen.insert(pool.remove(idx).0.clone());
    }
    Ok(chosen)
}

fn is_unknown(tag: &Tag, unknown: &BTreeSet<String>) -> bool {
    tag.slot_type().is_some_and(|t| unknown.contains(t))
}

pub fn apply_train_strategy(
    train: &CorpusSplit,
    unknown: &BTreeSet<String>,
    strategy: Strategy,
) -> CorpusSplit {
    let utterances = train
        .utterances
        .iter()
        .filter_map(|u| {
            let touched = u.tags.iter().any(|t| is_unknown(t, unknown));
            if !touched {
                return Some(u.clone());
            }
            match strategy {
                Strategy::Remove => None,
                Strategy::Replace | Strategy::Mask => {
                    let mut out = u.clone();
                    for (tok, tag) in out.tokens.iter_mut().zip(out.tags.iter_mut()) {
                        if is_unknown(tag, unknown) {
                            *tag = Tag::Outside;
                            if strategy == Strategy::Mask {
                                *tok = MASK_TOKEN.to_owned();
                            }
                        }
                    }
                    Some(out)
                }
            }
        })
        .collect();
    CorpusSplit {
        name: train.name,
        utterances,
    }
}

/// Every `B-u`/`I-u` tag with `u` unknown becomes `NS`; nothing else changes.
pub fn relabel_eval_split(split: &CorpusSplit, unknown: &BTreeSet<String>) -> CorpusSplit {
    let utterances = split
        .utterances
        .iter()
        .map(|u| {
            let mut out = u.clone();
            for tag in &mut out.tags {
                if is_unknown(tag, unknown) {
                    *tag = Tag::Novel;
                }
            }
            out
        })
        .collect();
    CorpusSplit {
        name: split.name,
        utterances,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsdBenchmark {
    pub train: CorpusSplit,
    pub val: CorpusSplit,
    pub test: CorpusSplit,
    pub unknown_types: BTreeSet<String>,
    pub in_domain_schema: SlotSchema,
    pub full_schema: SlotSchema,
    pub config: NsdConfig,
    /// Train utterance count before the strategy was applied.
    pub original_train_size: usize,
    /// Unknown-slot span counts of val/test before relabeling; adjacent
    /// unknown spans merge into one NS run afterwards, so they are recorded
    /// up front.
    pub original_unknown_values: SplitCounts,
    pub original_slot_values: SplitCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn reserved_check(split: &CorpusSplit) -> Result<(), BenchmarkError> {
    if split
        .utterances
        .iter()
        .any(|u| u.tokens.iter().any(|t| t == MASK_TOKEN))
    {
        return Err(BenchmarkError::ReservedToken { split: split.name });
    }
    Ok(())
}

fn slot_value_counts(split: &CorpusSplit, unknown: &BTreeSet<String>) -> (usize, usize) {
    let counts = span_counts_by_type(&split.utterances);
    let total = counts.values().sum();
    let unk = counts
        .iter()
        .filter(|(t, _)| unknown.contains(*t))
        .map(|(_, c)| c)
        .sum();
    (total, unk)
}

pub fn build_benchmark(
    splits: &CorpusSplits,
    schema: &SlotSchema,
    config: &NsdConfig,
) -> Result<NsdBenchmark, BenchmarkError> {
    config.validate(schema)?;
    if config.strategy == Strategy::Mask {
        for s in [&splits.train, &splits.val, &splits.test] {
            reserved_check(s)?;
        }
    }
    let unknown_types = match &config.selection {
        UnknownSelection::Explicit(types) => types.iter().cloned().collect(),
        UnknownSelection::Proportion(p) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            select_unknown_types(schema, &splits.train, *p, &mut rng)?
        }
    };
    let train = apply_train_strategy(&splits.train, &unknown_types, config.strategy);
    if train.is_empty() {
        return Err(BenchmarkError::AllTrainRemoved);
    }
    let (val_total, val_unk) = slot_value_counts(&splits.val, &unknown_types);
    let (test_total, test_unk) = slot_value_counts(&splits.test, &unknown_types);
    let (train_total, train_unk) = slot_value_counts(&splits.train, &unknown_types);
    Ok(NsdBenchmark {
        val: relabel_eval_split(&splits.val, &unknown_types),
        test: relabel_eval_split(&splits.test, &unknown_types),
        in_domain_schema: schema.without(&unknown_types),
        full_schema: schema.clone(),
        original_train_size: splits.train.len(),
        original_unknown_values: SplitCounts {
            train: train_unk,
            val: val_unk,
            test: test_unk,
        },
        original_slot_values: SplitCounts {
            train: train_total,
            val: val_total,
            test: test_total,
        },
        train,
        unknown_types,
        config: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBenchmarkStats {
    pub in_domain_slot_types: usize,
    pub unknown_slot_types: usize,
    pub queries: usize,
    pub queries_with_unknown: usize,
    pub slot_values: usize,
    pub unknown_slot_values: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub train: SplitBenchmarkStats,
    pub val: SplitBenchmarkStats,
    pub test: SplitBenchmarkStats,
    /// Test OOV rate against the transformed train vocabulary.
    pub oov_word_percentage: f64,
    pub removed_train_fraction: f64,
    pub case_policy: CasePolicy,
}

impl BenchmarkStats {
    /// Unknown slot values as a percentage of all test slot values.
    pub fn test_unknown_value_share(&self) -> f64 {
        if self.test.slot_values == 0 {
            0.0
        } else {
            100.0 * self.test.unknown_slot_values as f64 / self.test.slot_values as f64
        }
    }
}

pub fn benchmark_stats(b: &NsdBenchmark, policy: CasePolicy) -> BenchmarkStats {
    let eval_stats = |split: &CorpusSplit, total: usize, unk: usize| SplitBenchmarkStats {
        in_domain_slot_types: b.in_domain_schema.len(),
        unknown_slot_types: b.unknown_types.len(),
        queries: split.len(),
        queries_with_unknown: split
            .utterances
            .iter()
            .filter(|u| u.tags.iter().any(Tag::is_novel))
            .count(),
        slot_values: total,
        unknown_slot_values: unk,
    };
    let train_values: usize = span_counts_by_type(&b.train.utterances).values().sum();
    let vocab = vocabulary(&b.train.utterances, policy);
    BenchmarkStats {
        train: SplitBenchmarkStats {
            in_domain_slot_types: b.in_domain_schema.len(),
            unknown_slot_types: b.unknown_types.len(),
            queries: b.train.len(),
            queries_with_unknown: 0,
            slot_values: train_values,
            unknown_slot_values: 0,
        },
        val: eval_stats(
            &b.val,
            b.original_slot_values.val,
            b.original_unknown_values.val,
        ),
        test: eval_stats(
            &b.test,
            b.original_slot_values.test,
            b.original_unknown_values.test,
        ),
        oov_word_percentage: oov_percentage(&b.test.utterances, &vocab, policy),
        removed_train_fraction: if b.original_train_size == 0 {
            0.0
        } else {
            1.0 - b.train.len() as f64 / b.original_train_size as f64
        },
        case_policy: policy,
    }
}
