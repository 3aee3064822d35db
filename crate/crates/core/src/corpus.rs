//! CoNLL-style slot-filling corpora: parsing, schemas and corpus statistics.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label used for every token of a novel (unknown) slot in evaluation data.
pub const NOVEL_LABEL: &str = "NS";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: expected {expected} whitespace-separated fields, found {found}")]
    MalformedLine {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: illegal tag {tag:?}")]
    IllegalTag { line: usize, tag: String },
    #[error("corpus contains no utterances")]
    EmptyCorpus,
    #[error("utterance has {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("utterance has no tokens")]
    EmptyUtterance,
    #[error("invalid token {0:?}: tokens must be nonempty and contain no whitespace")]
    InvalidToken(String),
    #[error("utterance {utterance} of the train split carries an NS tag")]
    NovelTagInTrain { utterance: usize },
    #[error("line {line}: token and tag sequences differ in length ({tokens} vs {tags})")]
    SequenceLengthMismatch {
        line: usize,
        tokens: usize,
        tags: usize,
    },
    #[error("token files have {tokens} lines but tag files have {tags}")]
    LineCountMismatch { tokens: usize, tags: usize },
}

/// A single BIO tag, or the unified novel-slot label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
    Novel,
}

impl Tag {
    /// Slot type of a `B-`/`I-` tag.
    pub fn slot_type(&self) -> Option<&str> {
        match self {
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
            Tag::Outside | Tag::Novel => None,
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, Tag::Novel)
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Tag::Outside)
    }

    /// Class name used by token-level metrics: the slot type, `O` or `NS`.
    pub fn class(&self) -> &str {
        match self {
            Tag::Outside => "O",
            Tag::Novel => NOVEL_LABEL,
            Tag::Begin(t) | Tag::Inside(t) => t,
        }
    }
}

fn valid_type(t: &str) -> bool {
    !t.is_empty() && t != NOVEL_LABEL && !t.chars().any(char::is_whitespace)
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => return Ok(Tag::Outside),
            NOVEL_LABEL => return Ok(Tag::Novel),
            _ => {}
        }
        if let Some(t) = s.strip_prefix("B-") {
            if valid_type(t) {
                return Ok(Tag::Begin(t.to_owned()));
            }
        } else if let Some(t) = s.strip_prefix("I-") {
            if valid_type(t) {
                return Ok(Tag::Inside(t.to_owned()));
            }
        }
        Err(s.to_owned())
    }
}

impl TryFrom<String> for Tag {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Tag> for String {
    fn from(t: Tag) -> Self {
        t.to_string()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Novel => f.write_str(NOVEL_LABEL),
            Tag::Begin(t) => write!(f, "B-{t}"),
            Tag::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

/// Token sequence with aligned tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl LabeledUtterance {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        if tokens.is_empty() {
            return Err(CorpusError::EmptyUtterance);
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(CorpusError::InvalidToken(bad.clone()));
        }
        Ok(Self { tokens, tags })
    }

    /// Convenience constructor from string slices; panics on invalid input.
    pub fn from_strs(tokens: &[&str], tags: &[&str]) -> Self {
        let tags = tags
            .iter()
            .map(|t| t.parse().unwrap_or_else(|e| panic!("bad tag {e}")))
            .collect();
        Self::new(tokens.iter().map(|s| s.to_string()).collect(), tags).expect("invalid utterance")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub utterances: Vec<LabeledUtterance>,
}

impl CorpusSplit {
    /// Train splits may not contain `NS` tags.
    pub fn new(name: SplitName, utterances: Vec<LabeledUtterance>) -> Result<Self, CorpusError> {
        if name == SplitName::Train {
            if let Some(i) = utterances
                .iter()
                .position(|u| u.tags.iter().any(Tag::is_novel))
            {
                return Err(CorpusError::NovelTagInTrain { utterance: i });
            }
        }
        Ok(Self { name, utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(LabeledUtterance::len).sum()
    }
}

/// The fixed train/val/test triple of one corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub train: CorpusSplit,
    pub val: CorpusSplit,
    pub test: CorpusSplit,
}

impl CorpusSplits {
    pub fn new(
        train: Vec<LabeledUtterance>,
        val: Vec<LabeledUtterance>,
        test: Vec<LabeledUtterance>,
    ) -> Result<Self, CorpusError> {
        Ok(Self {
            train: CorpusSplit::new(SplitName::Train, train)?,
            val: CorpusSplit::new(SplitName::Val, val)?,
            test: CorpusSplit::new(SplitName::Test, test)?,
        })
    }
}

/// Splits `text` into blocks of rows, each row holding exactly `ncols` fields.
/// Rows of one blank-line separated block, each with its 1-based line number.
pub(crate) type Block<'a> = Vec<(usize, Vec<&'a str>)>;

/// Returned rows carry their 1-based line number.
pub(crate) fn parse_columns(text: &str, ncols: usize) -> Result<Vec<Block<'_>>, CorpusError> {
    let mut blocks = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        if fields.len() != ncols {
            return Err(CorpusError::MalformedLine {
                line: i + 1,
                expected: ncols,
                found: fields.len(),
            });
        }
        current.push((i + 1, fields));
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    if blocks.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(blocks)
}

pub(crate) fn parse_tag(field: &str, line: usize) -> Result<Tag, CorpusError> {
    field
        .parse()
        .map_err(|tag| CorpusError::IllegalTag { line, tag })
}

/// Parses "token tag" lines; blank lines separate utterances.
pub fn parse_conll(text: &str) -> Result<Vec<LabeledUtterance>, CorpusError> {
    parse_columns(text, 2)?
        .into_iter()
        .map(|rows| {
            let mut tokens = Vec::with_capacity(rows.len());
            let mut tags = Vec::with_capacity(rows.len());
            for (line, fields) in rows {
                tokens.push(fields[0].to_owned());
                tags.push(parse_tag(fields[1], line)?);
            }
            LabeledUtterance::new(tokens, tags)
        })
        .collect()
}

/// Parses the one-utterance-per-line layout (`seq.in` / `seq.out` pairs)
/// in which several public slot-filling corpora are distributed.
pub fn parse_seq_pair(tokens: &str, tags: &str) -> Result<Vec<LabeledUtterance>, CorpusError> {
    let tok_lines: Vec<&str> = tokens.lines().filter(|l| !l.trim().is_empty()).collect();
    let tag_lines: Vec<&str> = tags.lines().filter(|l| !l.trim().is_empty()).collect();
    if tok_lines.len() != tag_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            tokens: tok_lines.len(),
            tags: tag_lines.len(),
        });
    }
    if tok_lines.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    tok_lines
        .iter()
        .zip(&tag_lines)
        .enumerate()
        .map(|(i, (tl, gl))| {
            let toks: Vec<String> = tl.split_whitespace().map(str::to_owned).collect();
            let tags = gl
                .split_whitespace()
                .map(|t| parse_tag(t, i + 1))
                .collect::<Result<Vec<_>, _>>()?;
            if toks.len() != tags.len() {
                return Err(CorpusError::SequenceLengthMismatch {
                    line: i + 1,
                    tokens: toks.len(),
                    tags: tags.len(),
                });
            }
            LabeledUtterance::new(toks, tags)
        })
        .collect()
}

/// Canonical CoNLL text: single-space separator, one blank line after each
/// utterance.
pub fn to_conll(utterances: &[LabeledUtterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        for (tok, tag) in u.tokens.iter().zip(&u.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// In-domain slot inventory and the BIO tag vocabulary derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    slot_types: Vec<String>,
    tag_vocab: Vec<Tag>,
}

impl SlotSchema {
    /// Builds a schema from slot-type names; duplicates collapse, order is
    /// lexicographic. `NS` is never a slot type and is dropped.
    pub fn from_types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = types
            .into_iter()
            .map(Into::into)
            .filter(|t| valid_type(t))
            .collect();
        let slot_types: Vec<String> = set.into_iter().collect();
        let mut tag_vocab = Vec::with_capacity(2 * slot_types.len() + 1);
        tag_vocab.push(Tag::Outside);
        for t in &slot_types {
            tag_vocab.push(Tag::Begin(t.clone()));
            tag_vocab.push(Tag::Inside(t.clone()));
        }
        Self {
            slot_types,
            tag_vocab,
        }
    }

    pub fn slot_types(&self) -> &[String] {
        &self.slot_types
    }

    /// `O` followed by `B-t`, `I-t` for each type in order.
    pub fn tag_vocab(&self) -> &[Tag] {
        &self.tag_vocab
    }

    pub fn contains(&self, slot_type: &str) -> bool {
        self.slot_types
            .binary_search_by(|t| t.as_str().cmp(slot_type))
            .is_ok()
    }

    pub fn len(&self) -> usize {
        self.slot_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_types.is_empty()
    }

    /// Schema with the given types removed.
    pub fn without<'a, I>(&self, removed: I) -> Self
    where
        I: IntoIterator<Item = &'a String>,
    {
        let removed: HashSet<&String> = removed.into_iter().collect();
        Self::from_types(
            self.slot_types
                .iter()
                .filter(|t| !removed.contains(t))
                .cloned(),
        )
    }
}

pub fn derive_schema(train: &CorpusSplit) -> SlotSchema {
    SlotSchema::from_types(
        train
            .utterances
            .iter()
            .flat_map(|u| u.tags.iter().filter_map(Tag::slot_type)),
    )
}

/// Casing applied to tokens before counting vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CasePolicy {
    #[default]
    Lowercase,
    Verbatim,
}

impl CasePolicy {
    pub fn apply<'a>(self, token: &'a str) -> std::borrow::Cow<'a, str> {
        match self {
            CasePolicy::Lowercase => std::borrow::Cow::Owned(token.to_lowercase()),
            CasePolicy::Verbatim => std::borrow::Cow::Borrowed(token),
        }
    }
}

pub fn vocabulary(utterances: &[LabeledUtterance], policy: CasePolicy) -> HashSet<String> {
    utterances
        .iter()
        .flat_map(|u| u.tokens.iter())
        .map(|t| policy.apply(t).into_owned())
        .collect()
}

/// Percentage of word tokens in `eval` whose type is missing from `vocab`.
pub fn oov_percentage(
    eval: &[LabeledUtterance],
    vocab: &HashSet<String>,
    policy: CasePolicy,
) -> f64 {
    let (mut total, mut oov) = (0usize, 0usize);
    for tok in eval.iter().flat_map(|u| u.tokens.iter()) {
        total += 1;
        if !vocab.contains(policy.apply(tok).as_ref()) {
            oov += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * oov as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub vocabulary_size: usize,
    pub oov_word_percentage: f64,
    pub num_slots: usize,
    pub split_sizes: SplitSizes,
    pub case_policy: CasePolicy,
}

pub fn compute_stats(splits: &CorpusSplits, policy: CasePolicy) -> CorpusStats {
    let vocab = vocabulary(&splits.train.utterances, policy);
    CorpusStats {
        vocabulary_size: vocab.len(),
        oov_word_percentage: oov_percentage(&splits.test.utterances, &vocab, policy),
        num_slots: derive_schema(&splits.train).len(),
        split_sizes: SplitSizes {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        case_policy: policy,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BioWarningKind {
    /// `I-x` at the start, after `O` or after `NS`.
    OrphanInside,
    /// `I-x` directly after a tag of another slot type.
    TypeSwitch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioWarning {
    pub index: usize,
    pub kind: BioWarningKind,
}

/// Flags `I-` tags that do not continue a span of the same type. They stay
/// legal; span extraction treats them as span starts.
pub fn validate_bio(utt: &LabeledUtterance) -> Vec<BioWarning> {
    let mut warnings = Vec::new();
    let mut prev: Option<&Tag> = None;
    for (i, tag) in utt.tags.iter().enumerate() {
        if let Tag::Inside(t) = tag {
            let kind = match prev.and_then(Tag::slot_type) {
                None => Some(BioWarningKind::OrphanInside),
                Some(p) if p != t => Some(BioWarningKind::TypeSwitch),
                Some(_) => None,
            };
            if let Some(kind) = kind {
                warnings.push(BioWarning { index: i, kind });
            }
        }
        prev = Some(tag);
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_single_utterance() {
        let utts = parse_conll("play O\nsong B-music_item\n\n").unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].tokens, vec!["play", "song"]);
        assert_eq!(
            utts[0].tags,
            vec![Tag::Outside, Tag::Begin("music_item".into())]
        );
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(parse_conll(""), Err(CorpusError::EmptyCorpus));
        assert_eq!(parse_conll("\n\n  \n"), Err(CorpusError::EmptyCorpus));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        assert_eq!(
            parse_conll("play O B-x\n"),
            Err(CorpusError::MalformedLine {
                line: 1,
                expected: 2,
                found: 3
            })
        );
        assert!(matches!(
            parse_conll("a O\nb\n"),
            Err(CorpusError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn illegal_tags_rejected() {
        for bad in ["X-a", "B-", "I-", "B-NS", "o", "BNS"] {
            let text = format!("tok {bad}\n");
            assert!(
                matches!(
                    parse_conll(&text),
                    Err(CorpusError::IllegalTag { line: 1, .. })
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn tabs_and_runs_of_spaces_separate_fields() {
        let utts = parse_conll("play\tO\nsong    B-x\n\n\n\nnext O\n").unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(utts[1].tokens, vec!["next"]);
    }

    #[test]
    fn ns_rejected_in_train_only() {
        let u = LabeledUtterance::from_strs(&["a"], &["NS"]);
        assert!(CorpusSplit::new(SplitName::Train, vec![u.clone()]).is_err());
        assert!(CorpusSplit::new(SplitName::Test, vec![u]).is_ok());
    }

    #[test]
    fn seq_pair_layout() {
        let utts = parse_seq_pair("play song\nhi\n", "O B-music_item\nO\n").unwrap();
        assert_eq!(utts.len(), 2);
        assert!(matches!(
            parse_seq_pair("a b\n", "O\n"),
            Err(CorpusError::SequenceLengthMismatch { line: 1, .. })
        ));
    }

    fn split(name: SplitName, text: &str) -> CorpusSplit {
        CorpusSplit::new(name, parse_conll(text).unwrap()).unwrap()
    }

    #[test]
    fn schema_is_sorted_and_derived() {
        let train = split(
            SplitName::Train,
            "a B-artist\nb I-artist\nc B-album\nd I-album\ne O\n",
        );
        let schema = derive_schema(&train);
        assert_eq!(schema.slot_types(), ["album", "artist"]);
        assert_eq!(schema.tag_vocab().len(), 5);
        assert_eq!(schema.tag_vocab()[0], Tag::Outside);
    }

    #[test]
    fn all_outside_schema() {
        let train = split(SplitName::Train, "a O\nb O\n");
        let schema = derive_schema(&train);
        assert!(schema.slot_types().is_empty());
        assert_eq!(schema.tag_vocab(), [Tag::Outside]);
    }

    #[test]
    fn identical_train_and_test_have_no_oov() {
        let splits = CorpusSplits {
            train: split(SplitName::Train, "play O\n"),
            val: split(SplitName::Val, "play O\n"),
            test: split(SplitName::Test, "play O\n"),
        };
        let stats = compute_stats(&splits, CasePolicy::Lowercase);
        assert_eq!(stats.oov_word_percentage, 0.0);
        assert_eq!(stats.vocabulary_size, 1);
    }

    #[test]
    fn oov_counts_tokens_not_types() {
        let splits = CorpusSplits {
            train: split(SplitName::Train, "play O\nPlay O\n"),
            val: split(SplitName::Val, "x O\n"),
            test: split(SplitName::Test, "play O\nnew O\nnew O\nPLAY O\n"),
        };
        let lower = compute_stats(&splits, CasePolicy::Lowercase);
        assert_eq!(lower.vocabulary_size, 1);
        assert_eq!(lower.oov_word_percentage, 50.0);
        let verbatim = compute_stats(&splits, CasePolicy::Verbatim);
        assert_eq!(verbatim.vocabulary_size, 2);
        assert_eq!(verbatim.oov_word_percentage, 75.0);
    }

    #[test]
    fn bio_warnings() {
        let orphan = LabeledUtterance::from_strs(&["a", "b"], &["O", "I-artist"]);
        assert_eq!(
            validate_bio(&orphan),
            vec![BioWarning {
                index: 1,
                kind: BioWarningKind::OrphanInside
            }]
        );
        let ok = LabeledUtterance::from_strs(&["a", "b"], &["B-artist", "I-artist"]);
        assert!(validate_bio(&ok).is_empty());
        let switch = LabeledUtterance::from_strs(&["a", "b"], &["B-a", "I-b"]);
        assert_eq!(
            validate_bio(&switch),
            vec![BioWarning {
                index: 1,
                kind: BioWarningKind::TypeSwitch
            }]
        );
        let first = LabeledUtterance::from_strs(&["a"], &["I-a"]);
        assert_eq!(validate_bio(&first)[0].kind, BioWarningKind::OrphanInside);
    }

    fn arb_tag() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("O".to_string()),
            Just("NS".to_string()),
            "[a-z_.]{1,6}".prop_map(|t| format!("B-{t}")),
            "[a-z_.]{1,6}".prop_map(|t| format!("I-{t}")),
        ]
    }

    fn arb_utterance() -> impl Strategy<Value = Vec<(String, String)>> {
        prop::collection::vec(("[A-Za-z0-9'.]{1,8}", arb_tag()), 1..8)
    }

    proptest! {
        #[test]
        fn conll_round_trip(utts in prop::collection::vec(arb_utterance(), 1..6), sep in "[ \t]{1,3}") {
            // Non-canonical rendering: arbitrary separators and extra blank lines.
            let mut text = String::new();
            for u in &utts {
                for (tok, tag) in u {
                    text.push_str(&format!("{tok}{sep}{tag}\n"));
                }
                text.push_str("\n\n");
            }
            let parsed = parse_conll(&text).unwrap();
            let canonical = to_conll(&parsed);
            prop_assert_eq!(parse_conll(&canonical).unwrap(), parsed.clone());
            let mut expected = String::new();
            for u in &utts {
                for (tok, tag) in u {
                    expected.push_str(&format!("{tok} {tag}\n"));
                }
                expected.push('\n');
            }
            prop_assert_eq!(canonical, expected);
        }

        #[test]
        fn lowercase_vocab_ignores_case(words in prop::collection::vec("[a-zA-Z]{1,6}", 1..30)) {
            let tags = vec!["O"; words.len()];
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let u = LabeledUtterance::from_strs(&refs, &tags);
            let upper: Vec<String> = words.iter().map(|w| w.to_uppercase()).collect();
            let urefs: Vec<&str> = upper.iter().map(String::as_str).collect();
            let v = LabeledUtterance::from_strs(&urefs, &tags);
            prop_assert_eq!(
                vocabulary(&[u], CasePolicy::Lowercase),
                vocabulary(&[v], CasePolicy::Lowercase)
            );
        }

        #[test]
        fn schema_never_contains_ns(utts in prop::collection::vec(arb_utterance(), 1..6)) {
            let parsed: Vec<LabeledUtterance> = utts.iter().map(|u| {
                let toks: Vec<&str> = u.iter().map(|(a, _)| a.as_str()).collect();
                let tags: Vec<&str> = u.iter().map(|(_, b)| if b == "NS" { "O" } else { b.as_str() }).collect();
                LabeledUtterance::from_strs(&toks, &tags)
            }).collect();
            let train = CorpusSplit::new(SplitName::Train, parsed).unwrap();
            let schema = derive_schema(&train);
            prop_assert!(!schema.contains("NS"));
            prop_assert_eq!(schema.tag_vocab().len(), 2 * schema.len() + 1);
        }
    }
}
