//! Novel-slot detectors (MSP and GDA), threshold calibration on the
//! validation split and the NS override of in-domain predictions.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledUtterance, SlotSchema, Tag};
use crate::crf::{CrfError, Objective, TaggerModel};
use crate::exec::Parallelism;
use crate::features::{RowView, TokenFeatureMatrix};
use crate::float_serde;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector needs {0} marginals")]
    MissingMarginals(&'static str),
    #[error("detector needs a {0}")]
    MissingModel(&'static str),
    #[error("class {0} has no supporting tokens")]
    EmptyClass(String),
    #[error("covariance is not positive definite after adding ridge {0}")]
    SingularCovariance(f64),
    #[error("ridge must be positive and finite, got {0}")]
    InvalidRidge(f64),
    #[error("validation split has no gold NS token; pass a threshold explicitly")]
    NoNovelInVal,
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: model has {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{what}: expected {expected} items, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Crf(#[from] CrfError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Msp,
    Gda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectObjective {
    Binary,
    Multiple,
    #[serde(rename = "binary+multiple")]
    BinaryMultiple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceStrategy {
    /// Novel when the nearest class is far.
    Minimum,
    /// Novel when the farthest and nearest classes are about equally far.
    Difference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Mahalanobis,
    Euclidean,
}

/// Which end of a score range indicates novelty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Flag when `score < threshold`.
    LowIsNovel,
    /// Flag when `score > threshold`.
    HighIsNovel,
}

impl Orientation {
    pub fn flags(self, score: f64, threshold: f64) -> bool {
        match self {
            Orientation::LowIsNovel => score < threshold,
            Orientation::HighIsNovel => score > threshold,
        }
    }
}

impl fmt::Display for DetectObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectObjective::Binary => "binary",
            DetectObjective::Multiple => "multiple",
            DetectObjective::BinaryMultiple => "binary+multiple",
        })
    }
}

impl FromStr for DetectObjective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Self::Binary),
            "multiple" => Ok(Self::Multiple),
            "binary+multiple" => Ok(Self::BinaryMultiple),
            o => Err(format!("unknown detector objective {o:?}")),
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "msp" => Ok(Self::Msp),
            "gda" => Ok(Self::Gda),
            o => Err(format!("unknown detection method {o:?}")),
        }
    }
}

impl FromStr for DistanceStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minimum" => Ok(Self::Minimum),
            "difference" => Ok(Self::Difference),
            o => Err(format!("unknown distance strategy {o:?}")),
        }
    }
}

impl FromStr for DistanceMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mahalanobis" => Ok(Self::Mahalanobis),
            "euclidean" => Ok(Self::Euclidean),
            o => Err(format!("unknown distance metric {o:?}")),
        }
    }
}

/// Detector identity without thresholds, e.g. `gda:multiple:minimum` or
/// `msp:binary+multiple`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub method: Method,
    pub objective: DetectObjective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<DistanceStrategy>,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::InvalidConfig(m.into()));
        match (self.method, self.distance) {
            (Method::Gda, None) => return bad("GDA needs a distance strategy"),
            (Method::Msp, Some(_)) => return bad("MSP takes no distance strategy"),
            _ => {}
        }
        if self.method == Method::Gda && self.objective == DetectObjective::BinaryMultiple {
            return bad("binary+multiple is only defined for MSP");
        }
        Ok(())
    }

    /// Score orientation of the primary threshold.
    pub fn orientation(&self) -> Orientation {
        match self.distance {
            Some(DistanceStrategy::Minimum) => Orientation::HighIsNovel,
            _ => Orientation::LowIsNovel,
        }
    }

    /// Tagger objectives this detector consumes marginals from.
    pub fn needs_binary_tagger(&self) -> bool {
        self.method == Method::Msp && self.objective != DetectObjective::Multiple
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.method {
            Method::Msp => "msp",
            Method::Gda => "gda",
        };
        write!(f, "{m}:{}", self.objective)?;
        match self.distance {
            Some(DistanceStrategy::Minimum) => f.write_str(":minimum"),
            Some(DistanceStrategy::Difference) => f.write_str(":difference"),
            None => Ok(()),
        }
    }
}

impl FromStr for DetectorSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let method = match parts.first().copied() {
            Some("msp") => Method::Msp,
            Some("gda") => Method::Gda,
            _ => return Err(format!("detector {s:?} must start with msp: or gda:")),
        };
        let objective = parts
            .get(1)
            .ok_or_else(|| format!("detector {s:?} lacks an objective"))?
            .parse()?;
        let distance = match parts.get(2).copied() {
            None => None,
            Some("minimum") => Some(DistanceStrategy::Minimum),
            Some("difference") => Some(DistanceStrategy::Difference),
            Some(o) => return Err(format!("unknown distance strategy {o:?}")),
        };
        if parts.len() > 3 {
            return Err(format!("detector {s:?} has too many fields"));
        }
        let spec = DetectorSpec {
            method,
            objective,
            distance,
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// A detector with its thresholds. For `binary+multiple`, `threshold`
/// applies to the multiple tagger and `binary_threshold` to the binary one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(flatten)]
    pub spec: DetectorSpec,
    #[serde(with = "float_serde")]
    pub threshold: f64,
    #[serde(
        default,
        with = "float_serde::option",
        skip_serializing_if = "Option::is_none"
    )]
    pub binary_threshold: Option<f64>,
}

impl DetectorConfig {
    pub fn new(spec: DetectorSpec, threshold: f64) -> Self {
        Self {
            spec,
            threshold,
            binary_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        self.spec.validate()?;
        if self.threshold.is_nan() || self.binary_threshold.is_some_and(f64::is_nan) {
            return Err(DetectError::InvalidConfig("threshold is NaN".into()));
        }
        let combined = self.spec.objective == DetectObjective::BinaryMultiple;
        if combined != self.binary_threshold.is_some() {
            return Err(DetectError::InvalidConfig(
                "binary+multiple carries exactly two thresholds, other detectors one".into(),
            ));
        }
        Ok(())
    }
}

/// Confidence of one marginal row: its largest entry.
pub fn msp_score(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// NS mask of one utterance from flattened `n x k` marginals.
pub fn msp_detect(
    binary: Option<&[f64]>,
    multiple: Option<&[f64]>,
    n_tokens: usize,
    cfg: &DetectorConfig,
) -> Result<Vec<bool>, DetectError> {
    cfg.validate()?;
    if cfg.spec.method != Method::Msp {
        return Err(DetectError::InvalidConfig("not an MSP detector".into()));
    }
    let scores = |m: Option<&[f64]>, name| -> Result<Vec<f64>, DetectError> {
        let m = m.ok_or(DetectError::MissingMarginals(name))?;
        if n_tokens == 0 || m.len() % n_tokens != 0 {
            return Err(DetectError::LengthMismatch {
                what: "marginal rows",
                expected: n_tokens,
                found: m.len(),
            });
        }
        Ok(m.chunks(m.len() / n_tokens).map(msp_score).collect())
    };
    let below = |s: Vec<f64>, th: f64| s.into_iter().map(|v| v < th).collect::<Vec<_>>();
    Ok(match cfg.spec.objective {
        DetectObjective::Multiple => below(scores(multiple, "multiple")?, cfg.threshold),
        DetectObjective::Binary => below(scores(binary, "binary")?, cfg.threshold),
        DetectObjective::BinaryMultiple => {
            let m = below(scores(multiple, "multiple")?, cfg.threshold);
            let b = below(scores(binary, "binary")?, cfg.binary_threshold.unwrap());
            m.into_iter().zip(b).map(|(x, y)| x && y).collect()
        }
    })
}

/// Per-class Gaussians with a shared, ridge-regularised covariance.
#[derive(Clone, Debug)]
pub struct GdaModel {
    pub labels: Vec<String>,
    pub metric: DistanceMetric,
    pub means: Vec<DVector<f64>>,
    /// Regularised covariance.
    pub covariance: DMatrix<f64>,
    pub ridge: f64,
    /// Inverse Cholesky factor of `covariance`.
    whitener: DMatrix<f64>,
    whitened_means: Vec<DVector<f64>>,
}

impl GdaModel {
    /// Builds a model from means and an already regularised covariance.
    pub fn from_parts(
        labels: Vec<String>,
        means: Vec<DVector<f64>>,
        covariance: DMatrix<f64>,
        ridge: f64,
        metric: DistanceMetric,
    ) -> Result<Self, DetectError> {
        let d = covariance.nrows();
        if labels.len() != means.len() {
            return Err(DetectError::LengthMismatch {
                what: "class means",
                expected: labels.len(),
                found: means.len(),
            });
        }
        if let Some(m) = means.iter().find(|m| m.len() != d) {
            return Err(DetectError::DimensionMismatch {
                expected: d,
                found: m.len(),
            });
        }
        let chol = nalgebra::linalg::Cholesky::new(covariance.clone())
            .ok_or(DetectError::SingularCovariance(ridge))?;
        let whitener = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(DetectError::SingularCovariance(ridge))?;
        if whitener.iter().any(|v| !v.is_finite()) {
            return Err(DetectError::SingularCovariance(ridge));
        }
        let whitened_means = match metric {
            DistanceMetric::Mahalanobis => means.iter().map(|m| &whitener * m).collect(),
            DistanceMetric::Euclidean => means.clone(),
        };
        Ok(Self {
            labels,
            metric,
            means,
            covariance,
            ridge,
            whitener,
            whitened_means,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn transform(&self, row: RowView<'_>) -> DVector<f64> {
        let d = self.dim();
        match self.metric {
            DistanceMetric::Euclidean => DVector::from_vec(row.to_dense(d)),
            DistanceMetric::Mahalanobis => match row {
                RowView::Dense(v) => &self.whitener * DVector::from_column_slice(v),
                RowView::Sparse(entries) => {
                    let mut z = DVector::zeros(d);
                    for &(j, v) in entries {
                        z.axpy(v, &self.whitener.column(j as usize), 1.0);
                    }
                    z
                }
            },
        }
    }

    /// Distance from `row` to every class mean.
    pub fn distances(&self, row: RowView<'_>) -> Vec<f64> {
        let z = self.transform(row);
        self.whitened_means
            .iter()
            .map(|m| {
                let mut s = 0.0;
                for (a, b) in z.iter().zip(m.iter()) {
                    let diff = a - b;
                    s += diff * diff;
                }
                s.sqrt()
            })
            .collect()
    }
}

/// Training rows grouped by class for [`gda_fit`].
pub struct GdaSample<'a> {
    pub features: &'a [TokenFeatureMatrix],
    /// Class index per token; `None` tokens are skipped.
    pub classes: &'a [Vec<Option<usize>>],
}

/// Fits class means and the pooled within-class covariance (divided by the
/// token count). `ridge = None` picks `1e-3 * trace / d`.
pub fn gda_fit(
    sample: GdaSample<'_>,
    labels: Vec<String>,
    ridge: Option<f64>,
    metric: DistanceMetric,
) -> Result<GdaModel, DetectError> {
    if let Some(r) = ridge {
        if !(r > 0.0 && r.is_finite()) {
            return Err(DetectError::InvalidRidge(r));
        }
    }
    if sample.features.len() != sample.classes.len() {
        return Err(DetectError::LengthMismatch {
            what: "class sequences",
            expected: sample.features.len(),
            found: sample.classes.len(),
        });
    }
    let k = labels.len();
    let d = match sample.features.first() {
        Some(x) => x.dim(),
        None => {
            return Err(DetectError::EmptyClass(
                labels.first().cloned().unwrap_or_default(),
            ))
        }
    };
    let mut sums = vec![DVector::<f64>::zeros(d); k];
    let mut support = vec![0usize; k];
    let mut any_dense = false;
    for (x, cls) in sample.features.iter().zip(sample.classes) {
        if x.dim() != d {
            return Err(DetectError::DimensionMismatch {
                expected: d,
                found: x.dim(),
            });
        }
        if cls.len() != x.n_rows() {
            return Err(DetectError::LengthMismatch {
                what: "token classes",
                expected: x.n_rows(),
                found: cls.len(),
            });
        }
        any_dense |= !x.is_sparse();
        for (row, c) in x.rows().zip(cls) {
            if let Some(c) = *c {
                if c >= k {
                    return Err(DetectError::InvalidConfig(format!(
                        "class index {c} out of range"
                    )));
                }
                row.axpy(1.0, sums[c].as_mut_slice());
                support[c] += 1;
            }
        }
    }
    if let Some(c) = support.iter().position(|&n| n == 0) {
        return Err(DetectError::EmptyClass(labels[c].clone()));
    }
    let means: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&support)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let total: usize = support.iter().sum();
    let rows = || {
        sample
            .features
            .iter()
            .zip(sample.classes)
            .flat_map(|(x, cls)| x.rows().zip(cls.iter().copied()))
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    };
    let mut cov = if any_dense {
        centered_scatter(rows(), &means, d, total)
    } else {
        sparse_scatter(rows(), &means, &support, d)
    };
    cov /= total as f64;
    let lambda = ridge.unwrap_or_else(|| {
        let tr = cov.trace();
        if tr > 0.0 {
            1e-3 * tr / d as f64
        } else {
            1e-3
        }
    });
    for i in 0..d {
        cov[(i, i)] += lambda;
    }
    GdaModel::from_parts(labels, means, cov, lambda, metric)
}

/// `sum_i (x_i - mu_{c_i})(x_i - mu_{c_i})^T` via one matrix product.
fn centered_scatter<'a>(
    rows: impl Iterator<Item = (RowView<'a>, usize)>,
    means: &[DVector<f64>],
    d: usize,
    total: usize,
) -> DMatrix<f64> {
    let mut x = DMatrix::<f64>::zeros(total, d);
    for (i, (row, c)) in rows.enumerate() {
        let dense = row.to_dense(d);
        for j in 0..d {
            x[(i, j)] = dense[j] - means[c][j];
        }
    }
    x.tr_mul(&x)
}

/// Same scatter as [`centered_scatter`] computed as
/// `sum_i x_i x_i^T - sum_c n_c mu_c mu_c^T`, touching only nonzeros.
fn sparse_scatter<'a>(
    rows: impl Iterator<Item = (RowView<'a>, usize)>,
    means: &[DVector<f64>],
    support: &[usize],
    d: usize,
) -> DMatrix<f64> {
    let mut s = DMatrix::<f64>::zeros(d, d);
    for (row, _) in rows {
        if let RowView::Sparse(e) = row {
            for &(a, va) in e {
                for &(b, vb) in e {
                    s[(a as usize, b as usize)] += va * vb;
                }
            }
        }
    }
    for (m, &n) in means.iter().zip(support) {
        s.ger(-(n as f64), m, m, 1.0);
    }
    s
}

/// Detection score of one token from its class distances.
pub fn distance_score(distances: &[f64], strategy: DistanceStrategy) -> f64 {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    match strategy {
        DistanceStrategy::Minimum => min,
        DistanceStrategy::Difference => {
            distances.iter().copied().fold(f64::NEG_INFINITY, f64::max) - min
        }
    }
}

/// Flags one token and returns its per-class distances.
pub fn gda_detect(
    model: &GdaModel,
    row: RowView<'_>,
    strategy: DistanceStrategy,
    threshold: f64,
) -> (bool, Vec<f64>) {
    let d = model.distances(row);
    let s = distance_score(&d, strategy);
    let flag = match strategy {
        DistanceStrategy::Minimum => s > threshold,
        DistanceStrategy::Difference => s < threshold,
    };
    (flag, d)
}

/// Fits GDA on the training tokens with the classes of `objective`.
/// Classes without a single training token are dropped.
pub fn fit_gda_for_objective(
    objective: Objective,
    schema: &SlotSchema,
    train: &[LabeledUtterance],
    train_x: &[TokenFeatureMatrix],
    ridge: Option<f64>,
    metric: DistanceMetric,
) -> Result<GdaModel, DetectError> {
    let all = objective.labels(schema);
    let raw: Vec<Vec<Option<usize>>> = train
        .iter()
        .map(|u| u.tags.iter().map(|t| objective.index_of(&all, t)).collect())
        .collect();
    let mut support = vec![0usize; all.len()];
    for c in raw.iter().flatten().flatten() {
        support[*c] += 1;
    }
    let mut remap = vec![None; all.len()];
    let mut labels = Vec::new();
    for (i, l) in all.into_iter().enumerate() {
        if support[i] > 0 {
            remap[i] = Some(labels.len());
            labels.push(l);
        }
    }
    let classes: Vec<Vec<Option<usize>>> = raw
        .iter()
        .map(|u| u.iter().map(|c| c.and_then(|c| remap[c])).collect())
        .collect();
    gda_fit(
        GdaSample {
            features: train_x,
            classes: &classes,
        },
        labels,
        ridge,
        metric,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(with = "float_serde")]
    pub threshold: f64,
    pub flagged: usize,
    pub token_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(with = "float_serde")]
    pub threshold: f64,
    pub token_f1: f64,
    pub flagged: usize,
    /// Every candidate threshold in sweep order.
    pub curve: Vec<CurvePoint>,
}

fn f1_percent(tp: usize, flagged: usize, gold: usize) -> f64 {
    if flagged + gold == 0 {
        0.0
    } else {
        200.0 * tp as f64 / (flagged + gold) as f64
    }
}

/// `a` beats `b` on F1, ties going to fewer flagged tokens.
fn better(a: (usize, usize), b: (usize, usize), gold: usize) -> bool {
    let (tp_a, fl_a) = a;
    let (tp_b, fl_b) = b;
    let lhs = tp_a as u128 * (fl_b + gold) as u128;
    let rhs = tp_b as u128 * (fl_a + gold) as u128;
    match lhs.cmp(&rhs) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => fl_a < fl_b,
    }
}

/// Sweeps candidate thresholds over the scores of eligible tokens.
/// Ineligible tokens are never flagged but still count as gold. Candidates
/// at or below `floor` are skipped.
fn sweep(
    scores: &[f64],
    gold: &[bool],
    eligible: Option<&[bool]>,
    orientation: Orientation,
    floor: Option<f64>,
) -> Result<Calibration, DetectError> {
    if scores.len() != gold.len() {
        return Err(DetectError::LengthMismatch {
            what: "gold labels",
            expected: scores.len(),
            found: gold.len(),
        });
    }
    let total_gold = gold.iter().filter(|g| **g).count();
    if total_gold == 0 {
        return Err(DetectError::NoNovelInVal);
    }
    let mut pts: Vec<(f64, bool)> = scores
        .iter()
        .zip(gold)
        .enumerate()
        .filter(|(i, _)| eligible.is_none_or(|e| e[*i]))
        .map(|(_, (s, g))| (*s, *g))
        .collect();
    if pts.iter().any(|(s, _)| s.is_nan()) {
        return Err(DetectError::InvalidConfig("NaN detector score".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Unique values with (count, gold count).
    let mut uniq: Vec<(f64, usize, usize)> = Vec::new();
    for (s, g) in pts {
        match uniq.last_mut() {
            Some(last) if last.0 == s => {
                last.1 += 1;
                last.2 += g as usize;
            }
            _ => uniq.push((s, 1, g as usize)),
        }
    }
    let m = uniq.len();
    let n_elig: usize = uniq.iter().map(|u| u.1).sum();
    let gold_elig: usize = uniq.iter().map(|u| u.2).sum();
    // Candidate j flags the lowest j unique values (low-is-novel) or all but
    // the lowest j (high-is-novel).
    let mut curve = Vec::with_capacity(m + 1);
    let (mut below_n, mut below_g) = (0usize, 0usize);
    for j in 0..=m {
        if j > 0 {
            below_n += uniq[j - 1].1;
            below_g += uniq[j - 1].2;
        }
        let threshold = if j == 0 {
            f64::NEG_INFINITY
        } else if j == m {
            f64::INFINITY
        } else {
            let (a, b) = (uniq[j - 1].0, uniq[j].0);
            let mid = a + (b - a) / 2.0;
            match orientation {
                Orientation::LowIsNovel if mid <= a => b,
                Orientation::HighIsNovel if mid >= b => a,
                _ => mid,
            }
        };
        let (flagged, tp) = match orientation {
            Orientation::LowIsNovel => (below_n, below_g),
            Orientation::HighIsNovel => (n_elig - below_n, gold_elig - below_g),
        };
        if floor.is_some_and(|f| threshold <= f) {
            continue;
        }
        curve.push((threshold, tp, flagged));
    }
    let best = curve
        .iter()
        .copied()
        .reduce(|best, c| {
            if better((c.1, c.2), (best.1, best.2), total_gold) {
                c
            } else {
                best
            }
        })
        .expect("the +inf candidate always survives the floor");
    Ok(Calibration {
        threshold: best.0,
        token_f1: f1_percent(best.1, best.2, total_gold),
        flagged: best.2,
        curve: curve
            .into_iter()
            .map(|(threshold, tp, flagged)| CurvePoint {
                threshold,
                flagged,
                token_f1: f1_percent(tp, flagged, total_gold),
                span_f1: None,
            })
            .collect(),
    })
}

/// Picks the threshold maximising NS token F1 on the validation tokens.
pub fn calibrate_threshold(
    scores: &[f64],
    gold_ns: &[bool],
    orientation: Orientation,
) -> Result<Calibration, DetectError> {
    sweep(scores, gold_ns, None, orientation, None)
}

/// Two thresholds of the combined MSP detector, found by alternating sweeps
/// starting from a binary threshold that lets every token through.
pub fn calibrate_combined(
    multiple_scores: &[f64],
    binary_scores: &[f64],
    gold_ns: &[bool],
) -> Result<(Calibration, Calibration), DetectError> {
    let mut theta_b = f64::INFINITY;
    let mut result = None;
    for _ in 0..2 {
        let elig_m: Vec<bool> = binary_scores.iter().map(|s| *s < theta_b).collect();
        let cal_m = sweep(
            multiple_scores,
            gold_ns,
            Some(&elig_m),
            Orientation::LowIsNovel,
            None,
        )?;
        let elig_b: Vec<bool> = multiple_scores
            .iter()
            .map(|s| *s < cal_m.threshold)
            .collect();
        let cal_b = sweep(
            binary_scores,
            gold_ns,
            Some(&elig_b),
            Orientation::LowIsNovel,
            Some(0.5),
        )?;
        theta_b = cal_b.threshold;
        result = Some((cal_m, cal_b));
    }
    Ok(result.unwrap())
}

/// Detector scores of every token of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScores {
    /// Viterbi tags of the multiple tagger.
    pub ind_tags: Vec<Tag>,
    /// Score compared against `threshold`.
    pub primary: Vec<f64>,
    /// Binary MSP score of the combined detector.
    pub binary: Option<Vec<f64>>,
}

/// Trained components a detector may draw on.
#[derive(Clone, Copy)]
pub struct DetectorModels<'a> {
    pub multiple: &'a TaggerModel,
    pub binary: Option<&'a TaggerModel>,
    pub gda: Option<&'a GdaModel>,
}

pub fn score_utterances(
    models: DetectorModels<'_>,
    xs: &[TokenFeatureMatrix],
    spec: &DetectorSpec,
    par: Parallelism,
) -> Result<Vec<UtteranceScores>, DetectError> {
    spec.validate()?;
    if models.multiple.objective != Objective::Multiple {
        return Err(DetectError::InvalidConfig(
            "in-domain tagger must use the multiple objective".into(),
        ));
    }
    let binary = if spec.needs_binary_tagger() {
        let b = models
            .binary
            .ok_or(DetectError::MissingModel("binary tagger"))?;
        if b.objective != Objective::Binary {
            return Err(DetectError::InvalidConfig(
                "binary tagger has wrong objective".into(),
            ));
        }
        Some(b)
    } else {
        None
    };
    let gda = match spec.method {
        Method::Gda => Some(models.gda.ok_or(DetectError::MissingModel("GDA model"))?),
        Method::Msp => None,
    };
    for x in xs {
        for dim in [
            Some(models.multiple.dim),
            binary.map(|b| b.dim),
            gda.map(GdaModel::dim),
        ] {
            if let Some(dim) = dim.filter(|d| *d != x.dim()) {
                return Err(DetectError::DimensionMismatch {
                    expected: dim,
                    found: x.dim(),
                });
            }
        }
    }
    let msp_rows = |m: &TaggerModel, x: &TokenFeatureMatrix| -> Vec<f64> {
        m.posterior_marginals(x)
            .chunks(m.num_labels())
            .map(msp_score)
            .collect()
    };
    Ok(par.map(xs, |x| {
        let ind_tags = models.multiple.decode_tags(x);
        let (primary, binary_scores) = match (spec.method, spec.objective) {
            (Method::Msp, DetectObjective::Multiple) => (msp_rows(models.multiple, x), None),
            (Method::Msp, DetectObjective::Binary) => (msp_rows(binary.unwrap(), x), None),
            (Method::Msp, DetectObjective::BinaryMultiple) => (
                msp_rows(models.multiple, x),
                Some(msp_rows(binary.unwrap(), x)),
            ),
            (Method::Gda, _) => {
                let g = gda.unwrap();
                let strategy = spec.distance.unwrap();
                (
                    x.rows()
                        .map(|r| distance_score(&g.distances(r), strategy))
                        .collect(),
                    None,
                )
            }
        };
        UtteranceScores {
            ind_tags,
            primary,
            binary: binary_scores,
        }
    }))
}

/// NS mask of scored utterances under `cfg`.
pub fn apply_thresholds(scores: &[UtteranceScores], cfg: &DetectorConfig) -> Vec<Vec<bool>> {
    let orient = cfg.spec.orientation();
    scores
        .iter()
        .map(|u| {
            u.primary
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut f = orient.flags(*s, cfg.threshold);
                    if let (Some(b), Some(th)) = (&u.binary, cfg.binary_threshold) {
                        f &= b[i] < th;
                    }
                    f
                })
                .collect()
        })
        .collect()
}

/// Calibrated detector with its validation curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDetector {
    pub config: DetectorConfig,
    pub calibration: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_calibration: Option<Calibration>,
}

/// Maximum curve points whose span F1 is evaluated.
const SPAN_CURVE_POINTS: usize = 64;

/// Calibrates the thresholds of `spec` on scored validation utterances and
/// fills span F1 into an evenly thinned copy of the token-F1 curve.
pub fn calibrate_detector(
    spec: DetectorSpec,
    val_scores: &[UtteranceScores],
    val: &[LabeledUtterance],
) -> Result<CalibratedDetector, DetectError> {
    if val_scores.len() != val.len() {
        return Err(DetectError::LengthMismatch {
            what: "validation utterances",
            expected: val.len(),
            found: val_scores.len(),
        });
    }
    let gold: Vec<bool> = val
        .iter()
        .flat_map(|u| u.tags.iter().map(Tag::is_novel))
        .collect();
    let primary: Vec<f64> = val_scores
        .iter()
        .flat_map(|u| u.primary.iter().copied())
        .collect();
    let (mut cal, bin_cal, config) = match spec.objective {
        DetectObjective::BinaryMultiple => {
            let binary: Vec<f64> = val_scores
                .iter()
                .flat_map(|u| u.binary.as_deref().unwrap_or(&[]).iter().copied())
                .collect();
            let (m, b) = calibrate_combined(&primary, &binary, &gold)?;
            let cfg = DetectorConfig {
                spec,
                threshold: m.threshold,
                binary_threshold: Some(b.threshold),
            };
            (m, Some(b), cfg)
        }
        _ => {
            let floor = (spec.method == Method::Msp && spec.objective == DetectObjective::Binary)
                .then_some(0.5);
            let c = sweep(&primary, &gold, None, spec.orientation(), floor)?;
            let cfg = DetectorConfig::new(spec, c.threshold);
            (c, None, cfg)
        }
    };
    let gold_tags: Vec<Vec<Tag>> = val
        .iter()
        .map(|u| {
            u.tags
                .iter()
                .map(|t| {
                    if t.is_novel() {
                        Tag::Novel
                    } else {
                        Tag::Outside
                    }
                })
                .collect()
        })
        .collect();
    let n = cal.curve.len();
    let step = n.div_ceil(SPAN_CURVE_POINTS).max(1);
    for (i, point) in cal.curve.iter_mut().enumerate() {
        if i % step != 0 && i + 1 != n && point.threshold != cal.threshold {
            continue;
        }
        let probe = DetectorConfig {
            threshold: point.threshold,
            ..config
        };
        let pred: Vec<Vec<Tag>> = apply_thresholds(val_scores, &probe)
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|f| if f { Tag::Novel } else { Tag::Outside })
                    .collect()
            })
            .collect();
        let prf = crate::metrics::span_f1(
            &pred,
            &gold_tags,
            &crate::metrics::ClassFilter::Class(crate::corpus::NOVEL_LABEL),
        )
        .expect("aligned by construction");
        point.span_f1 = Some(prf.f1);
    }
    Ok(CalibratedDetector {
        config,
        calibration: cal,
        binary_calibration: bin_cal,
    })
}

/// Final tags of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtterancePrediction {
    pub ind_tags: Vec<Tag>,
    pub ns_mask: Vec<bool>,
    pub final_tags: Vec<Tag>,
}

impl UtterancePrediction {
    pub fn new(ind_tags: Vec<Tag>, ns_mask: Vec<bool>) -> Result<Self, DetectError> {
        if ind_tags.len() != ns_mask.len() {
            return Err(DetectError::LengthMismatch {
                what: "NS mask",
                expected: ind_tags.len(),
                found: ns_mask.len(),
            });
        }
        let final_tags = ind_tags
            .iter()
            .zip(&ns_mask)
            .map(|(t, ns)| if *ns { Tag::Novel } else { t.clone() })
            .collect();
        Ok(Self {
            ind_tags,
            ns_mask,
            final_tags,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub utterances: Vec<UtterancePrediction>,
}

impl PredictionSet {
    pub fn from_masks(ind: Vec<Vec<Tag>>, masks: Vec<Vec<bool>>) -> Result<Self, DetectError> {
        if ind.len() != masks.len() {
            return Err(DetectError::LengthMismatch {
                what: "utterance masks",
                expected: ind.len(),
                found: masks.len(),
            });
        }
        Ok(Self {
            utterances: ind
                .into_iter()
                .zip(masks)
                .map(|(t, m)| UtterancePrediction::new(t, m))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn final_tags(&self) -> Vec<&[Tag]> {
        self.utterances
            .iter()
            .map(|u| u.final_tags.as_slice())
            .collect()
    }
}

/// Decodes in-domain tags with the multiple tagger and overrides the tokens
/// flagged by the configured detector with `NS`.
pub fn run_detection(
    models: DetectorModels<'_>,
    xs: &[TokenFeatureMatrix],
    cfg: &DetectorConfig,
    par: Parallelism,
) -> Result<PredictionSet, DetectError> {
    cfg.validate()?;
    let scores = score_utterances(models, xs, &cfg.spec, par)?;
    let masks = apply_thresholds(&scores, cfg);
    PredictionSet::from_masks(scores.into_iter().map(|s| s.ind_tags).collect(), masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msp(obj: DetectObjective) -> DetectorSpec {
        DetectorSpec {
            method: Method::Msp,
            objective: obj,
            distance: None,
        }
    }

    fn one_d_model() -> GdaModel {
        GdaModel::from_parts(
            vec!["a".into(), "b".into()],
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![10.0])],
            DMatrix::identity(1, 1),
            0.0,
            DistanceMetric::Mahalanobis,
        )
        .unwrap()
    }

    #[test]
    fn msp_score_examples() {
        assert_eq!(msp_score(&[0.9, 0.1]), 0.9);
        assert!(!Orientation::LowIsNovel.flags(msp_score(&[0.9, 0.1]), 0.5));
        assert_eq!(msp_score(&[0.42, 0.33, 0.25]), 0.42);
        assert!(Orientation::LowIsNovel.flags(0.42, 0.5));
    }

    #[test]
    fn msp_combined_rule() {
        let cfg = DetectorConfig {
            spec: msp(DetectObjective::BinaryMultiple),
            threshold: 0.5,
            binary_threshold: Some(0.6),
        };
        let multi = [0.3, 0.3, 0.4];
        let mask = msp_detect(Some(&[0.55, 0.45]), Some(&multi), 1, &cfg).unwrap();
        assert_eq!(mask, vec![true]);
        let mask = msp_detect(Some(&[0.95, 0.05]), Some(&multi), 1, &cfg).unwrap();
        assert_eq!(mask, vec![false]);
        assert!(matches!(
            msp_detect(None, Some(&multi), 1, &cfg),
            Err(DetectError::MissingMarginals("binary"))
        ));
    }

    #[test]
    fn msp_zero_threshold_flags_nothing() {
        let cfg = DetectorConfig::new(msp(DetectObjective::Multiple), 0.0);
        let m = [0.2, 0.3, 0.5, 0.9, 0.05, 0.05];
        assert_eq!(
            msp_detect(None, Some(&m), 2, &cfg).unwrap(),
            vec![false, false]
        );
    }

    #[test]
    fn gda_closed_form() {
        let g = one_d_model();
        let (ns, d) = gda_detect(&g, RowView::Dense(&[20.0]), DistanceStrategy::Minimum, 3.0);
        assert_eq!(d, vec![20.0, 10.0]);
        assert!(ns);
        let (ns, d) = gda_detect(
            &g,
            RowView::Dense(&[5.0]),
            DistanceStrategy::Difference,
            0.5,
        );
        assert_eq!(d, vec![5.0, 5.0]);
        assert!(ns);
        let (ns, _) = gda_detect(&g, RowView::Dense(&[10.0]), DistanceStrategy::Minimum, 1e-9);
        assert!(!ns);
    }

    #[test]
    fn gda_fit_zero_within_variance() {
        let xs = vec![TokenFeatureMatrix::dense(0, 1, vec![0.0, 0.0, 10.0, 10.0]).unwrap()];
        let classes = vec![vec![Some(0), Some(0), Some(1), Some(1)]];
        let g = gda_fit(
            GdaSample {
                features: &xs,
                classes: &classes,
            },
            vec!["a".into(), "b".into()],
            Some(1.0),
            DistanceMetric::Mahalanobis,
        )
        .unwrap();
        assert_eq!(g.means[0][0], 0.0);
        assert_eq!(g.means[1][0], 10.0);
        assert_eq!(g.covariance[(0, 0)], 1.0);
    }

    #[test]
    fn gda_fit_errors() {
        let xs = vec![TokenFeatureMatrix::dense(0, 1, vec![0.0, 1.0]).unwrap()];
        let classes = vec![vec![Some(0), Some(0)]];
        let sample = || GdaSample {
            features: &xs,
            classes: &classes,
        };
        let labels = || vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            gda_fit(sample(), labels(), Some(1.0), DistanceMetric::Mahalanobis),
            Err(DetectError::EmptyClass(c)) if c == "b"
        ));
        assert!(matches!(
            gda_fit(sample(), labels(), Some(0.0), DistanceMetric::Mahalanobis),
            Err(DetectError::InvalidRidge(_))
        ));
    }

    #[test]
    fn identity_covariance_metrics_agree_exactly() {
        let means = vec![
            DVector::from_vec(vec![0.3, -1.2, 2.0]),
            DVector::from_vec(vec![1.5, 0.25, -0.7]),
        ];
        let mk = |m| {
            GdaModel::from_parts(
                vec!["a".into(), "b".into()],
                means.clone(),
                DMatrix::identity(3, 3),
                0.0,
                m,
            )
            .unwrap()
        };
        let (maha, eucl) = (
            mk(DistanceMetric::Mahalanobis),
            mk(DistanceMetric::Euclidean),
        );
        for x in [[0.1, 0.2, 0.3], [-4.0, 7.5, 1e-3], [1.5, 0.25, -0.7]] {
            for s in [DistanceStrategy::Minimum, DistanceStrategy::Difference] {
                assert_eq!(
                    gda_detect(&maha, RowView::Dense(&x), s, 1.0),
                    gda_detect(&eucl, RowView::Dense(&x), s, 1.0)
                );
            }
        }
        let sparse = [(0u32, 0.1), (2u32, 0.3)];
        assert_eq!(
            maha.distances(RowView::Sparse(&sparse)),
            eucl.distances(RowView::Dense(&[0.1, 0.0, 0.3]))
        );
    }

    #[test]
    fn sparse_and_dense_scatter_agree() {
        let rows: Vec<Vec<(u32, f64)>> = vec![
            vec![(0, 1.0), (3, 1.0)],
            vec![(1, 1.0), (3, 2.0)],
            vec![(0, 1.0), (2, 1.0)],
            vec![(2, 1.0), (3, 1.0)],
            vec![(1, 3.0)],
        ];
        let sparse = vec![TokenFeatureMatrix::sparse(0, 4, rows.clone()).unwrap()];
        let dense_vals: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let mut v = vec![0.0; 4];
                for (j, x) in r {
                    v[*j as usize] += x;
                }
                v
            })
            .collect();
        let dense = vec![TokenFeatureMatrix::dense(0, 4, dense_vals).unwrap()];
        let classes = vec![vec![Some(0), Some(1), Some(0), Some(1), Some(1)]];
        let fit = |xs: &[TokenFeatureMatrix]| {
            gda_fit(
                GdaSample {
                    features: xs,
                    classes: &classes,
                },
                vec!["a".into(), "b".into()],
                None,
                DistanceMetric::Mahalanobis,
            )
            .unwrap()
        };
        let (a, b) = (fit(&sparse), fit(&dense));
        for (x, y) in a.covariance.iter().zip(b.covariance.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.ridge, b.ridge);
    }

    #[test]
    fn calibration_hand_enumerated() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let gold = [false, false, true, true];
        let c = calibrate_threshold(&scores, &gold, Orientation::LowIsNovel).unwrap();
        assert_eq!(c.token_f1, 100.0);
        assert_eq!(c.flagged, 2);
        assert!((c.threshold - 0.5).abs() < 1e-12);
        assert_eq!(c.curve.len(), 5);

        assert!(matches!(
            calibrate_threshold(&scores, &[false; 4], Orientation::LowIsNovel),
            Err(DetectError::NoNovelInVal)
        ));

        let c = calibrate_threshold(
            &[0.7; 4],
            &[true, false, false, false],
            Orientation::LowIsNovel,
        )
        .unwrap();
        assert_eq!(c.threshold, f64::INFINITY);
        assert!((c.token_f1 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_high_orientation() {
        let scores = [1.0, 2.0, 9.0, 8.0];
        let gold = [false, false, true, true];
        let c = calibrate_threshold(&scores, &gold, Orientation::HighIsNovel).unwrap();
        assert_eq!(c.token_f1, 100.0);
        assert!(c.threshold > 2.0 && c.threshold < 8.0);
    }

    #[test]
    fn calibration_adjacent_floats() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let c = calibrate_threshold(&[a, b], &[true, false], Orientation::LowIsNovel).unwrap();
        assert_eq!(c.token_f1, 100.0);
        assert!(a < c.threshold && b >= c.threshold);
    }

    #[test]
    fn binary_calibration_skips_dead_zone() {
        let spec = msp(DetectObjective::Binary);
        let val = vec![LabeledUtterance::from_strs(
            &["a", "b", "c"],
            &["NS", "O", "O"],
        )];
        let scores = vec![UtteranceScores {
            ind_tags: vec![Tag::Outside; 3],
            primary: vec![0.51, 0.99, 0.97],
            binary: None,
        }];
        let cal = calibrate_detector(spec, &scores, &val).unwrap();
        assert!(cal.calibration.curve.iter().all(|p| p.threshold > 0.5));
        assert_eq!(cal.calibration.token_f1, 100.0);
        assert_eq!(cal.calibration.curve[0].span_f1, Some(100.0));
    }

    #[test]
    fn combined_calibration_finds_joint_rule() {
        // Token 0 is novel: low on both. Token 1 ties it on multiple and is
        // only separable through the binary scores.
        let multi = [0.4, 0.4, 0.9];
        let binary = [0.55, 0.95, 0.52];
        let gold = [true, false, false];
        let (m, b) = calibrate_combined(&multi, &binary, &gold).unwrap();
        assert_eq!(m.token_f1, 100.0);
        assert_eq!(b.token_f1, 100.0);
        assert!(b.threshold > 0.55 && b.threshold < 0.95);
        let cfg = DetectorConfig {
            spec: msp(DetectObjective::BinaryMultiple),
            threshold: m.threshold,
            binary_threshold: Some(b.threshold),
        };
        let mask: Vec<bool> = (0..3)
            .map(|i| {
                msp_detect(
                    Some(&[binary[i], 1.0 - binary[i]]),
                    Some(&[multi[i], (1.0 - multi[i]) / 2.0, (1.0 - multi[i]) / 2.0]),
                    1,
                    &cfg,
                )
                .unwrap()[0]
            })
            .collect();
        assert_eq!(mask, vec![true, false, false]);
    }

    #[test]
    fn override_examples() {
        let ind: Vec<Tag> = ["O", "B-a", "I-a"]
            .iter()
            .map(|t| t.parse().unwrap())
            .collect();
        let none = UtterancePrediction::new(ind.clone(), vec![false; 3]).unwrap();
        assert_eq!(none.final_tags, ind);
        let all = UtterancePrediction::new(ind.clone(), vec![true; 3]).unwrap();
        assert!(all.final_tags.iter().all(Tag::is_novel));
    }

    #[test]
    fn table_one_override() {
        let ind: Vec<Tag> = ["O", "O", "O", "O", "O", "O", "B-artist", "I-artist"]
            .iter()
            .map(|t| t.parse().unwrap())
            .collect();
        let mask = vec![false, true, true, true, true, false, false, false];
        let p = UtterancePrediction::new(ind, mask).unwrap();
        let got: Vec<String> = p.final_tags.iter().map(Tag::to_string).collect();
        assert_eq!(
            got,
            ["O", "NS", "NS", "NS", "NS", "O", "B-artist", "I-artist"]
        );
    }

    #[test]
    fn spec_parsing() {
        for s in [
            "msp:binary",
            "msp:multiple",
            "msp:binary+multiple",
            "gda:binary:minimum",
            "gda:multiple:difference",
        ] {
            let spec: DetectorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        for s in [
            "gda:multiple",
            "msp:multiple:minimum",
            "gda:binary+multiple:minimum",
            "lof:binary",
        ] {
            assert!(s.parse::<DetectorSpec>().is_err(), "{s}");
        }
        let cfg = DetectorConfig {
            spec: "msp:binary+multiple".parse().unwrap(),
            threshold: f64::NEG_INFINITY,
            binary_threshold: Some(0.7),
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<DetectorConfig>(&json).unwrap(), cfg);
        assert!(
            DetectorConfig::new("msp:binary+multiple".parse().unwrap(), 0.5)
                .validate()
                .is_err()
        );
    }

    proptest! {
        #[test]
        fn binary_msp_dead_zone(p in 0.0f64..=1.0, theta in 0.0f64..=0.5) {
            let cfg = DetectorConfig::new(msp(DetectObjective::Binary), theta);
            prop_assert_eq!(msp_detect(Some(&[p, 1.0 - p]), None, 1, &cfg).unwrap(), vec![false]);
        }

        #[test]
        fn msp_monotone_in_threshold(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..8),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let n = rows.len();
            let spec = msp(DetectObjective::Multiple);
            let a = msp_detect(None, Some(&flat), n, &DetectorConfig::new(spec, lo)).unwrap();
            let b = msp_detect(None, Some(&flat), n, &DetectorConfig::new(spec, hi)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn minimum_strategy_monotone(x in -30.0f64..30.0, t1 in 0.0f64..20.0, t2 in 0.0f64..20.0) {
            let g = one_d_model();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = gda_detect(&g, RowView::Dense(&[x]), DistanceStrategy::Minimum, lo).0;
            let b = gda_detect(&g, RowView::Dense(&[x]), DistanceStrategy::Minimum, hi).0;
            prop_assert!(!b || a);
        }

        #[test]
        fn final_tags_follow_mask(mask in prop::collection::vec(any::<bool>(), 1..10)) {
            let ind: Vec<Tag> = (0..mask.len())
                .map(|i| if i % 3 == 0 { Tag::Begin("x".into()) } else { Tag::Inside("x".into()) })
                .collect();
            let p = UtterancePrediction::new(ind.clone(), mask.clone()).unwrap();
            for i in 0..mask.len() {
                prop_assert_eq!(p.final_tags[i].is_novel(), mask[i]);
                if !mask[i] {
                    prop_assert_eq!(&p.final_tags[i], &ind[i]);
                }
                let s = p.final_tags[i].to_string();
                prop_assert!(s != "B-NS" && s != "I-NS");
            }
        }

        #[test]
        fn calibrated_threshold_is_optimal(
            pts in prop::collection::vec((0u8..20, any::<bool>()), 2..30),
        ) {
            prop_assume!(pts.iter().any(|p| p.1));
            let scores: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 20.0).collect();
            let gold: Vec<bool> = pts.iter().map(|p| p.1).collect();
            let c = calibrate_threshold(&scores, &gold, Orientation::LowIsNovel).unwrap();
            // Brute force over every threshold on a fine grid.
            let g = gold.iter().filter(|x| **x).count();
            let mut best = 0.0f64;
            for k in -1..=41 {
                let th = k as f64 / 40.0;
                let fl: Vec<bool> = scores.iter().map(|s| *s < th).collect();
                let tp = fl.iter().zip(&gold).filter(|(f, g)| **f && **g).count();
                let n = fl.iter().filter(|f| **f).count();
                best = best.max(f1_percent(tp, n, g));
            }
            prop_assert!((c.token_f1 - best).abs() < 1e-9);
            let flagged = scores.iter().filter(|s| **s < c.threshold).count();
            prop_assert_eq!(flagged, c.flagged);
        }
    }
}
