//! Token F1, exact-match span F1 (conlleval chunking), ROSE and the
//! NS error-category table.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{parse_columns, parse_tag, CorpusError, Tag, NOVEL_LABEL};

/// Restriction levels averaged by ROSE-mean.
pub const ROSE_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("utterance {utterance}: prediction has {pred} tags, gold has {gold}")]
    LengthMismatch {
        utterance: usize,
        pred: usize,
        gold: usize,
    },
    #[error("{pred} predicted utterances but {gold} gold utterances")]
    CountMismatch { pred: usize, gold: usize },
    #[error("ROSE restriction must lie in (0, 1], got {0}")]
    InvalidRestriction(String),
}

/// Inclusive token range carrying one label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Chunks a tag sequence the way conlleval does for IOB2 input: `B-x`
/// always opens a span, `I-x` continues only a span of type `x` and opens a
/// new one otherwise. Runs of `NS` form a single span.
pub fn extract_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (label, continues) = match tag {
            Tag::Outside => {
                if let Some((label, start)) = open.take() {
                    spans.push(Span {
                        label: label.to_owned(),
                        start,
                        end: i - 1,
                    });
                }
                continue;
            }
            Tag::Novel => (NOVEL_LABEL, true),
            Tag::Inside(t) => (t.as_str(), true),
            Tag::Begin(t) => (t.as_str(), false),
        };
        match open {
            Some((cur, _)) if continues && cur == label => {}
            _ => {
                if let Some((prev, start)) = open.take() {
                    spans.push(Span {
                        label: prev.to_owned(),
                        start,
                        end: i - 1,
                    });
                }
                open = Some((label, i));
            }
        }
    }
    if let Some((label, start)) = open {
        spans.push(Span {
            label: label.to_owned(),
            start,
            end: tags.len() - 1,
        });
    }
    spans
}

/// True-positive / predicted / gold counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

/// Precision, recall and F1 as percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl Prf {
    pub fn from_counts(c: Counts) -> Self {
        let precision = if c.pred == 0 {
            0.0
        } else {
            100.0 * c.tp as f64 / c.pred as f64
        };
        let recall = if c.gold == 0 {
            0.0
        } else {
            100.0 * c.tp as f64 / c.gold as f64
        };
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
            counts: c,
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_aligned<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
) -> Result<(), MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::CountMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.as_ref().len() != g.as_ref().len() {
            return Err(MetricsError::LengthMismatch {
                utterance: i,
                pred: p.as_ref().len(),
                gold: g.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// Token-level counts per class (`O` excluded).
pub fn token_counts<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
) -> Result<BTreeMap<String, Counts>, MetricsError> {
    check_aligned(pred, gold)?;
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for (pt, gt) in p.as_ref().iter().zip(g.as_ref()) {
            let (pc, gc) = (pt.class(), gt.class());
            if pc != "O" {
                out.entry(pc.to_owned()).or_default().pred += 1;
            }
            if gc != "O" {
                out.entry(gc.to_owned()).or_default().gold += 1;
            }
            if pc == gc && pc != "O" {
                out.entry(pc.to_owned()).or_default().tp += 1;
            }
        }
    }
    Ok(out)
}

/// Token F1 of one class over aligned sequences.
pub fn token_f1<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
    class: &str,
) -> Result<Prf, MetricsError> {
    let counts = token_counts(pred, gold)?;
    Ok(Prf::from_counts(
        counts.get(class).copied().unwrap_or_default(),
    ))
}

/// Exact-match span counts per label.
pub fn span_counts<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
) -> Result<BTreeMap<String, Counts>, MetricsError> {
    check_aligned(pred, gold)?;
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let ps = extract_spans(p.as_ref());
        let gs: HashSet<Span> = extract_spans(g.as_ref()).into_iter().collect();
        for s in &gs {
            out.entry(s.label.clone()).or_default().gold += 1;
        }
        for s in ps {
            let c = out.entry(s.label.clone()).or_default();
            c.pred += 1;
            if gs.contains(&s) {
                c.tp += 1;
            }
        }
    }
    Ok(out)
}

/// Which labels a span or token score aggregates over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassFilter<'a> {
    Class(&'a str),
    /// Every label except `NS`, micro-averaged.
    InDomain,
    All,
}

impl ClassFilter<'_> {
    fn accepts(&self, label: &str) -> bool {
        match self {
            ClassFilter::Class(c) => *c == label,
            ClassFilter::InDomain => label != NOVEL_LABEL,
            ClassFilter::All => true,
        }
    }
}

pub fn micro(counts: &BTreeMap<String, Counts>, filter: &ClassFilter<'_>) -> Prf {
    let mut total = Counts::default();
    for (label, c) in counts {
        if filter.accepts(label) {
            total += *c;
        }
    }
    Prf::from_counts(total)
}

pub fn span_f1<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
    filter: &ClassFilter<'_>,
) -> Result<Prf, MetricsError> {
    Ok(micro(&span_counts(pred, gold)?, filter))
}

/// ROSE at one restriction level, with the raw components kept so other
/// aggregations can be recomputed downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoseScore {
    pub restriction: f64,
    pub gold_spans: usize,
    pub correct_gold_spans: usize,
    pub pred_spans: usize,
    pub matched_pred_spans: usize,
    pub raw_precision: f64,
    pub raw_recall: f64,
    pub raw_f1: f64,
    pub nsd_span_f1: f64,
    /// Mean of `raw_f1` and `nsd_span_f1`.
    pub reported: f64,
    /// Set when there are no gold NS spans; recall is then undefined and
    /// reported as 0.
    pub no_gold_spans: bool,
}

/// Gold NS span `g` is correct when at least `restriction * len(g)` of its
/// tokens are predicted NS. A predicted NS span counts toward precision if
/// it overlaps any correct gold span, so overflow past a found span is not
/// punished while free-floating predictions are.
pub fn rose<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
    restriction: f64,
) -> Result<RoseScore, MetricsError> {
    if !(restriction > 0.0 && restriction <= 1.0) {
        return Err(MetricsError::InvalidRestriction(restriction.to_string()));
    }
    check_aligned(pred, gold)?;
    let nsd_span = span_f1(pred, gold, &ClassFilter::Class(NOVEL_LABEL))?;
    let (mut gold_n, mut correct, mut pred_n, mut matched) = (0, 0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        let correct_spans: Vec<Span> = novel_spans(g)
            .into_iter()
            .inspect(|_| gold_n += 1)
            .filter(|s| {
                let hit = (s.start..=s.end).filter(|&i| p[i].is_novel()).count();
                hit as f64 >= restriction * s.len() as f64
            })
            .collect();
        correct += correct_spans.len();
        for ps in novel_spans(p) {
            pred_n += 1;
            if correct_spans.iter().any(|c| c.overlaps(&ps)) {
                matched += 1;
            }
        }
    }
    let raw_precision = if pred_n == 0 {
        0.0
    } else {
        100.0 * matched as f64 / pred_n as f64
    };
    let raw_recall = if gold_n == 0 {
        0.0
    } else {
        100.0 * correct as f64 / gold_n as f64
    };
    let raw_f1 = harmonic(raw_precision, raw_recall);
    Ok(RoseScore {
        restriction,
        gold_spans: gold_n,
        correct_gold_spans: correct,
        pred_spans: pred_n,
        matched_pred_spans: matched,
        raw_precision,
        raw_recall,
        raw_f1,
        nsd_span_f1: nsd_span.f1,
        reported: (raw_f1 + nsd_span.f1) / 2.0,
        no_gold_spans: gold_n == 0,
    })
}

fn novel_spans(tags: &[Tag]) -> Vec<Span> {
    extract_spans(tags)
        .into_iter()
        .filter(|s| s.label == NOVEL_LABEL)
        .collect()
}

/// Percentages of NS errors bucketed by the non-NS side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub outside: f64,
    pub open_vocabulary: f64,
    pub other_slots: f64,
}

impl ErrorRow {
    pub fn sum(&self) -> f64 {
        self.outside + self.open_vocabulary + self.other_slots
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCategoryTable {
    /// Predicted NS where the gold tag is something else.
    pub prediction_is_ns: ErrorRow,
    /// Gold NS predicted as something else.
    pub target_is_ns: ErrorRow,
    pub total_errors: usize,
    pub no_errors: bool,
    pub open_vocabulary_types: Vec<String>,
}

pub fn error_analysis<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
    open_vocab: &[String],
) -> Result<ErrorCategoryTable, MetricsError> {
    check_aligned(pred, gold)?;
    let open: BTreeSet<&str> = open_vocab.iter().map(String::as_str).collect();
    let bucket = |t: &Tag| -> usize {
        match t.slot_type() {
            None => 0,
            Some(s) if open.contains(s) => 1,
            Some(_) => 2,
        }
    };
    let mut pred_ns = [0usize; 3];
    let mut target_ns = [0usize; 3];
    for (p, g) in pred.iter().zip(gold) {
        for (pt, gt) in p.as_ref().iter().zip(g.as_ref()) {
            match (pt.is_novel(), gt.is_novel()) {
                (true, false) => pred_ns[bucket(gt)] += 1,
                (false, true) => target_ns[bucket(pt)] += 1,
                _ => {}
            }
        }
    }
    let total: usize = pred_ns.iter().chain(&target_ns).sum();
    let pct = |n: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * n as f64 / total as f64
        }
    };
    let row = |c: [usize; 3]| ErrorRow {
        outside: pct(c[0]),
        open_vocabulary: pct(c[1]),
        other_slots: pct(c[2]),
    };
    Ok(ErrorCategoryTable {
        prediction_is_ns: row(pred_ns),
        target_is_ns: row(target_ns),
        total_errors: total,
        no_errors: total == 0,
        open_vocabulary_types: open.iter().map(|s| s.to_string()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub token: BTreeMap<String, Prf>,
    pub span: BTreeMap<String, Prf>,
    pub ind_span: Prf,
    pub nsd_span: Prf,
    pub nsd_token: Prf,
    pub rose: Vec<RoseScore>,
    pub rose_mean: f64,
    pub errors: ErrorCategoryTable,
}

/// Scores `pred` against `gold` with every metric of the report.
pub fn evaluate<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(
    pred: &[P],
    gold: &[G],
    open_vocab: &[String],
) -> Result<MetricsReport, MetricsError> {
    let token_c = token_counts(pred, gold)?;
    let span_c = span_counts(pred, gold)?;
    let rose = ROSE_LEVELS
        .iter()
        .map(|&p| self::rose(pred, gold, p))
        .collect::<Result<Vec<_>, _>>()?;
    let rose_mean = rose.iter().map(|r| r.reported).sum::<f64>() / rose.len() as f64;
    Ok(MetricsReport {
        token: token_c
            .iter()
            .map(|(k, c)| (k.clone(), Prf::from_counts(*c)))
            .collect(),
        span: span_c
            .iter()
            .map(|(k, c)| (k.clone(), Prf::from_counts(*c)))
            .collect(),
        ind_span: micro(&span_c, &ClassFilter::InDomain),
        nsd_span: micro(&span_c, &ClassFilter::Class(NOVEL_LABEL)),
        nsd_token: Prf::from_counts(token_c.get(NOVEL_LABEL).copied().unwrap_or_default()),
        rose,
        rose_mean,
        errors: error_analysis(pred, gold, open_vocab)?,
    })
}

impl MetricsReport {
    /// Aligned plain-text rendering with two-decimal percentages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>9} {:>9} {:>7}",
            "summary", "precision", "recall", "f1", "count"
        );
        let mut row = |name: &str, p: &Prf| {
            let _ = writeln!(
                s,
                "{:<28} {:>9.2} {:>9.2} {:>9.2} {:>7}",
                name, p.precision, p.recall, p.f1, p.counts.gold
            );
        };
        row("IND span", &self.ind_span);
        row("NSD span", &self.nsd_span);
        row("NSD token", &self.nsd_token);
        for (label, p) in &self.span {
            row(&format!("span {label}"), p);
        }
        for r in &self.rose {
            let _ = writeln!(
                s,
                "ROSE-{:<3} {:>9.2}",
                (r.restriction * 100.0).round(),
                r.reported
            );
        }
        let _ = writeln!(s, "ROSE-mean {:>9.2}", self.rose_mean);
        s.push_str(&self.errors.to_table());
        s
    }
}

impl ErrorCategoryTable {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8} {:>8} {:>8}",
            "NSD errors (%)", "O", "open", "other", "sum"
        );
        for (name, r) in [
            ("Prediction is NS", &self.prediction_is_ns),
            ("Target is NS", &self.target_is_ns),
        ] {
            let _ = writeln!(
                s,
                "{:<18} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                name,
                r.outside,
                r.open_vocabulary,
                r.other_slots,
                r.sum()
            );
        }
        s
    }
}

/// One utterance of a prediction file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictedUtterance {
    pub tokens: Vec<String>,
    pub gold: Vec<Tag>,
    pub pred: Vec<Tag>,
}

/// Parses the three-column `token gold prediction` format.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictedUtterance>, CorpusError> {
    parse_columns(text, 3)?
        .into_iter()
        .map(|rows| {
            let mut u = PredictedUtterance {
                tokens: Vec::with_capacity(rows.len()),
                gold: Vec::with_capacity(rows.len()),
                pred: Vec::with_capacity(rows.len()),
            };
            for (line, f) in rows {
                u.tokens.push(f[0].to_owned());
                u.gold.push(parse_tag(f[1], line)?);
                u.pred.push(parse_tag(f[2], line)?);
            }
            Ok(u)
        })
        .collect()
}

pub fn write_predictions(utts: &[PredictedUtterance]) -> String {
    let mut out = String::new();
    for u in utts {
        for ((tok, g), p) in u.tokens.iter().zip(&u.gold).zip(&u.pred) {
            let _ = writeln!(out, "{tok} {g} {p}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{} vs {}", a, b);
            }};
        }
        pub(crate) use assert_close;
    }

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn span(label: &str, start: usize, end: usize) -> Span {
        Span {
            label: label.into(),
            start,
            end,
        }
    }

    #[test]
    fn spans_basic() {
        assert_eq!(extract_spans(&tags("O B-a I-a O")), vec![span("a", 1, 2)]);
    }

    #[test]
    fn spans_orphans_and_switches() {
        assert_eq!(
            extract_spans(&tags("I-a I-b")),
            vec![span("a", 0, 0), span("b", 1, 1)]
        );
        assert_eq!(
            extract_spans(&tags("B-a B-a I-a O I-a")),
            vec![span("a", 0, 0), span("a", 1, 2), span("a", 4, 4)]
        );
    }

    #[test]
    fn spans_novel_runs() {
        assert_eq!(
            extract_spans(&tags("NS NS O NS")),
            vec![span("NS", 0, 1), span("NS", 3, 3)]
        );
        assert_eq!(
            extract_spans(&tags("B-a NS I-a")),
            vec![span("a", 0, 0), span("NS", 1, 1), span("a", 2, 2)]
        );
    }

    // The motivating utterance: "play is this my world by leo arnaud".
    fn example_gold() -> Vec<Tag> {
        tags("O NS NS NS NS O B-artist I-artist")
    }

    #[test]
    fn token_f1_partial_novel_span() {
        let pred = tags("O NS NS NS O O B-artist I-artist");
        let prf = token_f1(&[pred], &[example_gold()], NOVEL_LABEL).unwrap();
        assert_close!(prf.precision, 100.0, 1e-12);
        assert_close!(prf.recall, 75.0, 1e-12);
        assert_close!(prf.f1, 600.0 / 7.0, 1e-9);
    }

    #[test]
    fn token_f1_identity_and_empty() {
        let g = example_gold();
        assert_eq!(
            token_f1(
                std::slice::from_ref(&g),
                std::slice::from_ref(&g),
                NOVEL_LABEL
            )
            .unwrap()
            .f1,
            100.0
        );
        let none = tags("O O O O O O B-artist I-artist");
        assert_eq!(token_f1(&[none], &[g], NOVEL_LABEL).unwrap().f1, 0.0);
    }

    #[test]
    fn token_f1_length_mismatch() {
        assert_eq!(
            token_f1(&[tags("O")], &[tags("O O")], "NS"),
            Err(MetricsError::LengthMismatch {
                utterance: 0,
                pred: 1,
                gold: 2
            })
        );
    }

    #[test]
    fn span_f1_boundary_miss() {
        let pred = tags("O NS NS NS O O B-artist I-artist");
        let prf = span_f1(&[pred], &[example_gold()], &ClassFilter::Class("NS")).unwrap();
        assert_eq!(prf.f1, 0.0);
    }

    #[test]
    fn span_f1_identity_three_classes() {
        let g = vec![tags("B-a I-a O B-b NS"), tags("B-c O I-a")];
        let counts = span_counts(&g, &g).unwrap();
        assert_eq!(counts.len(), 4);
        for c in counts.values() {
            assert_eq!(Prf::from_counts(*c).f1, 100.0);
        }
    }

    #[test]
    fn rose_partial_span() {
        let pred = tags("O NS NS NS O O B-artist I-artist");
        let half = rose(std::slice::from_ref(&pred), &[example_gold()], 0.5).unwrap();
        assert_eq!(half.correct_gold_spans, 1);
        assert_eq!(half.raw_f1, 100.0);
        let full = rose(&[pred], &[example_gold()], 1.0).unwrap();
        assert_eq!(full.correct_gold_spans, 0);
        assert_eq!(full.raw_f1, 0.0);
        assert_eq!(full.reported, 0.0);
        assert_eq!(half.reported, 50.0);
    }

    #[test]
    fn rose_overflow_not_punished() {
        let gold = tags("O O NS NS NS O O O O O");
        let pred = tags("NS NS NS NS NS NS NS NS NS NS");
        let r = rose(&[pred], &[gold], 1.0).unwrap();
        assert_eq!(r.correct_gold_spans, 1);
        assert_eq!(r.raw_precision, 100.0);
        assert_eq!(r.raw_recall, 100.0);
        assert_eq!(r.nsd_span_f1, 0.0);
        assert_eq!(r.reported, 50.0);
    }

    #[test]
    fn rose_identity_and_no_gold() {
        let g = example_gold();
        for p in ROSE_LEVELS {
            assert_eq!(
                rose(std::slice::from_ref(&g), std::slice::from_ref(&g), p)
                    .unwrap()
                    .reported,
                100.0
            );
        }
        let r = rose(&[tags("NS O")], &[tags("O O")], 0.5).unwrap();
        assert!(r.no_gold_spans);
        assert_eq!(r.raw_recall, 0.0);
        assert!(rose(&[tags("O")], &[tags("O")], 0.0).is_err());
        assert!(rose(&[tags("O")], &[tags("O")], 1.5).is_err());
    }

    #[test]
    fn free_floating_prediction_is_a_miss() {
        let gold = tags("NS O O O");
        let pred = tags("NS O O NS");
        let r = rose(&[pred], &[gold], 1.0).unwrap();
        assert_eq!(r.pred_spans, 2);
        assert_eq!(r.matched_pred_spans, 1);
        assert_eq!(r.raw_precision, 50.0);
    }

    #[test]
    fn error_table() {
        let g = example_gold();
        let perfect =
            error_analysis(std::slice::from_ref(&g), std::slice::from_ref(&g), &[]).unwrap();
        assert!(perfect.no_errors);
        assert_eq!(
            perfect.prediction_is_ns.sum() + perfect.target_is_ns.sum(),
            0.0
        );

        let single =
            error_analysis(&[tags("B-city")], &[tags("NS")], &["object_name".into()]).unwrap();
        assert_eq!(single.target_is_ns.other_slots, 100.0);
        assert_eq!(single.total_errors, 1);

        let mixed = error_analysis(
            &[tags("NS NS B-object_name O")],
            &[tags("O B-object_name NS NS")],
            &["object_name".into()],
        )
        .unwrap();
        assert_eq!(mixed.prediction_is_ns.outside, 25.0);
        assert_eq!(mixed.prediction_is_ns.open_vocabulary, 25.0);
        assert_eq!(mixed.target_is_ns.open_vocabulary, 25.0);
        assert_eq!(mixed.target_is_ns.outside, 25.0);
        assert_close!(
            mixed.prediction_is_ns.sum() + mixed.target_is_ns.sum(),
            100.0,
            1e-9
        );
    }

    #[test]
    fn prediction_file_round_trip() {
        let text = "play O O\nsong B-x NS\n\nhi O O\n\n";
        let parsed = parse_predictions(text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(write_predictions(&parsed), text);
    }

    #[test]
    fn evaluate_report_fields() {
        let gold = vec![example_gold()];
        let pred = vec![tags("O NS NS NS O O B-artist I-artist")];
        let r = evaluate(&pred, &gold, &[]).unwrap();
        assert_eq!(r.ind_span.f1, 100.0);
        assert_eq!(r.nsd_span.f1, 0.0);
        assert_close!(r.nsd_token.f1, 600.0 / 7.0, 1e-9);
        assert_eq!(r.rose.len(), 4);
        assert_close!(r.rose_mean, (50.0 + 50.0 + 50.0 + 0.0) / 4.0, 1e-12);
        assert!(r.to_table().contains("ROSE-mean"));
    }
}
