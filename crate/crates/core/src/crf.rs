//! Linear-chain CRF tagger with linear emissions over token features.
//!
//! Scores: `emission[t][y] = W[y] . x_t + b[y]`, `transition[i][j]` for a
//! move from tag `i` to tag `j`. All chain quantities are computed in log
//! space with max-shifted log-sum-exp.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledUtterance, SlotSchema, Tag};
use crate::exec::Parallelism;
use crate::features::TokenFeatureMatrix;
use crate::metrics::{micro, span_counts, ClassFilter};

pub const NSDM_MAGIC: &[u8; 4] = b"NSDM";
pub const NSDM_VERSION: u32 = 1;
/// The non-`O` class of the binary objective.
pub const ENTITY_LABEL: &str = "ENT";

/// Examples per gradient work unit. Fixed so the summation order, and hence
/// the trained weights, do not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("dimension mismatch: model has {expected}, input has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("utterance {utterance}: {tokens} tokens but {rows} feature rows")]
    Alignment {
        utterance: usize,
        tokens: usize,
        rows: usize,
    },
    #[error("utterance {utterance}: tag {tag} is outside the model's label set")]
    UnknownLabel { utterance: usize, tag: String },
    #[error("{0} training utterances but {1} feature matrices")]
    CountMismatch(usize, usize),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `O` vs any slot token.
    Binary,
    /// Full in-domain BIO tag set.
    Multiple,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Objective::Binary),
            "multiple" => Ok(Objective::Multiple),
            other => Err(format!("unknown objective {other:?}")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Binary => "binary",
            Objective::Multiple => "multiple",
        })
    }
}

impl Objective {
    /// Label names of this objective over an in-domain schema.
    pub fn labels(self, schema: &SlotSchema) -> Vec<String> {
        match self {
            Objective::Binary => vec!["O".into(), ENTITY_LABEL.into()],
            Objective::Multiple => schema.tag_vocab().iter().map(Tag::to_string).collect(),
        }
    }

    /// Position of `tag` in `labels` under this objective's collapsing of
    /// slot tags. `NS` maps to nothing.
    pub fn index_of(self, labels: &[String], tag: &Tag) -> Option<usize> {
        match (self, tag) {
            (_, Tag::Novel) => None,
            (Objective::Binary, Tag::Outside) => Some(0),
            (Objective::Binary, _) => Some(1),
            (Objective::Multiple, t) => {
                let s = t.to_string();
                labels.iter().position(|l| *l == s)
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Objective::Binary => 0,
            Objective::Multiple => 1,
        }
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Chain inference over a dense `n x k` emission matrix and `k x k`
/// transitions.
///
/// Forward and backward messages are kept in log space. Each log-sum-exp
/// over the previous position is factorised as
/// `m_a + m_t + ln(sum_i exp(a_i - m_a) * exp(t_ij - m_t))` with the
/// shifted transition exponentials computed once per call, so a position
/// costs `k^2` multiply-adds and `2k` transcendentals. When the shifted sum
/// underflows the exact per-term log-sum-exp is used instead.
pub mod chain {
    use super::log_sum_exp;

    /// Below this a factorised sum has lost too much precision.
    const TINY: f64 = 1e-280;

    struct ShiftedTransitions {
        /// `exp(tr[i][j] - col_max[j])`.
        by_col: Vec<f64>,
        col_max: Vec<f64>,
        /// `exp(tr[i][j] - row_max[i])`.
        by_row: Vec<f64>,
        row_max: Vec<f64>,
    }

    impl ShiftedTransitions {
        fn new(tr: &[f64], k: usize) -> Self {
            let col_max: Vec<f64> = (0..k)
                .map(|j| {
                    (0..k)
                        .map(|i| tr[i * k + j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let row_max: Vec<f64> = (0..k)
                .map(|i| {
                    tr[i * k..(i + 1) * k]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let mut by_col = vec![0.0; k * k];
            let mut by_row = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    by_col[i * k + j] = (tr[i * k + j] - col_max[j]).exp();
                    by_row[i * k + j] = (tr[i * k + j] - row_max[i]).exp();
                }
            }
            Self {
                by_col,
                col_max,
                by_row,
                row_max,
            }
        }
    }

    fn shifted_exp(v: &[f64]) -> (f64, Vec<f64>) {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (m, v.iter().map(|x| (x - m).exp()).collect())
    }

    fn forward_with(em: &[f64], tr: &[f64], st: &ShiftedTransitions, k: usize) -> (Vec<f64>, f64) {
        let n = em.len() / k;
        let mut alpha = vec![0.0; n * k];
        alpha[..k].copy_from_slice(&em[..k]);
        for t in 1..n {
            let (prev, cur) = alpha.split_at_mut(t * k);
            let prev = &prev[(t - 1) * k..];
            let (ma, p) = shifted_exp(prev);
            for j in 0..k {
                let s: f64 = (0..k).map(|i| p[i] * st.by_col[i * k + j]).sum();
                cur[j] = em[t * k + j]
                    + if s > TINY {
                        ma + st.col_max[j] + s.ln()
                    } else {
                        log_sum_exp((0..k).map(|i| prev[i] + tr[i * k + j]))
                    };
            }
        }
        let log_z = log_sum_exp(alpha[(n - 1) * k..].iter().copied());
        (alpha, log_z)
    }

    fn backward_with(em: &[f64], tr: &[f64], st: &ShiftedTransitions, k: usize) -> Vec<f64> {
        let n = em.len() / k;
        let mut beta = vec![0.0; n * k];
        for t in (0..n - 1).rev() {
            let q: Vec<f64> = (0..k)
                .map(|j| em[(t + 1) * k + j] + beta[(t + 1) * k + j])
                .collect();
            let (mq, e) = shifted_exp(&q);
            for i in 0..k {
                let s: f64 = (0..k).map(|j| st.by_row[i * k + j] * e[j]).sum();
                beta[t * k + i] = if s > TINY {
                    st.row_max[i] + mq + s.ln()
                } else {
                    log_sum_exp((0..k).map(|j| tr[i * k + j] + q[j]))
                };
            }
        }
        beta
    }

    /// `alpha[t][j]`: log-sum of scores of prefixes ending in `j` at `t`.
    pub fn forward(em: &[f64], tr: &[f64], k: usize) -> (Vec<f64>, f64) {
        forward_with(em, tr, &ShiftedTransitions::new(tr, k), k)
    }

    /// `beta[t][i]`: log-sum of scores of suffixes after `t` given `i` at `t`.
    pub fn backward(em: &[f64], tr: &[f64], k: usize) -> Vec<f64> {
        backward_with(em, tr, &ShiftedTransitions::new(tr, k), k)
    }

    pub struct Posteriors {
        pub log_z: f64,
        /// `n x k` per-token marginals.
        pub unary: Vec<f64>,
        /// `k x k` expected transition counts summed over positions.
        pub pairwise: Vec<f64>,
    }

    pub fn posteriors(em: &[f64], tr: &[f64], k: usize) -> Posteriors {
        let n = em.len() / k;
        let st = ShiftedTransitions::new(tr, k);
        let (alpha, log_z) = forward_with(em, tr, &st, k);
        let beta = backward_with(em, tr, &st, k);
        let mut unary = vec![0.0; n * k];
        for t in 0..n {
            let row = &mut unary[t * k..(t + 1) * k];
            for (j, p) in row.iter_mut().enumerate() {
                *p = (alpha[t * k + j] + beta[t * k + j] - log_z).exp();
            }
            // Renormalise away accumulated rounding.
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        let tr_max = tr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tr_exp: Vec<f64> = tr.iter().map(|a| (a - tr_max).exp()).collect();
        let mut pairwise = vec![0.0; k * k];
        for t in 1..n {
            let (ma, a) = shifted_exp(&alpha[(t - 1) * k..t * k]);
            let q: Vec<f64> = (0..k).map(|j| em[t * k + j] + beta[t * k + j]).collect();
            let (mq, b) = shifted_exp(&q);
            // Bounded by the spread of the transition scores.
            let shift = ma + tr_max + mq - log_z;
            if shift < 600.0 {
                let scale = shift.exp();
                for i in 0..k {
                    let ai = a[i] * scale;
                    for j in 0..k {
                        pairwise[i * k + j] += ai * tr_exp[i * k + j] * b[j];
                    }
                }
            } else {
                for i in 0..k {
                    let ai = alpha[(t - 1) * k + i];
                    for j in 0..k {
                        pairwise[i * k + j] += (ai + tr[i * k + j] + q[j] - log_z).exp();
                    }
                }
            }
        }
        Posteriors {
            log_z,
            unary,
            pairwise,
        }
    }

    pub fn path_score(em: &[f64], tr: &[f64], k: usize, path: &[usize]) -> f64 {
        let mut s = 0.0;
        for (t, &y) in path.iter().enumerate() {
            s += em[t * k + y];
            if t > 0 {
                s += tr[path[t - 1] * k + y];
            }
        }
        s
    }

    /// Best path and its score. Ties go to the lowest tag index.
    pub fn viterbi(em: &[f64], tr: &[f64], k: usize) -> (Vec<usize>, f64) {
        let n = em.len() / k;
        let mut delta = em[..k].to_vec();
        let mut back = vec![0usize; n * k];
        for t in 1..n {
            let mut next = vec![0.0; k];
            for j in 0..k {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (i, d) in delta.iter().enumerate() {
                    let s = d + tr[i * k + j];
                    if s > best {
                        best = s;
                        arg = i;
                    }
                }
                next[j] = best + em[t * k + j];
                back[t * k + j] = arg;
            }
            delta = next;
        }
        let (mut best, mut last) = (f64::NEG_INFINITY, 0);
        for (j, d) in delta.iter().enumerate() {
            if *d > best {
                best = *d;
                last = j;
            }
        }
        let mut path = vec![0; n];
        path[n - 1] = last;
        for t in (1..n).rev() {
            path[t - 1] = back[t * k + path[t]];
        }
        (path, best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerModel {
    pub objective: Objective,
    pub labels: Vec<String>,
    pub dim: usize,
    /// `labels.len() x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `from * k + to`.
    pub transitions: Vec<f64>,
}

/// Gradient with the same layout as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub transitions: Vec<f64>,
}

impl Gradient {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            weights: vec![0.0; k * d],
            bias: vec![0.0; k],
            transitions: vec![0.0; k * k],
        }
    }

    fn add(&mut self, o: &Gradient) {
        for (a, b) in self
            .weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.transitions.iter_mut())
            .zip(o.weights.iter().chain(&o.bias).chain(&o.transitions))
        {
            *a += b;
        }
    }
}

impl TaggerModel {
    pub fn zeros(objective: Objective, labels: Vec<String>, dim: usize) -> Self {
        let k = labels.len();
        Self {
            objective,
            labels,
            dim,
            weights: vec![0.0; k * dim],
            bias: vec![0.0; k],
            transitions: vec![0.0; k * k],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Index of a gold tag in this model's label set. `NS` has none.
    pub fn label_index(&self, tag: &Tag) -> Option<usize> {
        self.objective.index_of(&self.labels, tag)
    }

    /// Tag emitted for a label index.
    pub fn label_tag(&self, idx: usize) -> Tag {
        match self.objective {
            Objective::Binary if idx == 0 => Tag::Outside,
            Objective::Binary => Tag::Inside(ENTITY_LABEL.into()),
            Objective::Multiple => self.labels[idx]
                .parse()
                .expect("model labels are valid tags"),
        }
    }

    fn check_dim(&self, x: &TokenFeatureMatrix) -> Result<(), CrfError> {
        if x.dim() != self.dim {
            return Err(CrfError::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        Ok(())
    }

    /// `n x k` emission scores.
    pub fn emissions(&self, x: &TokenFeatureMatrix) -> Vec<f64> {
        let k = self.num_labels();
        let mut em = Vec::with_capacity(x.n_rows() * k);
        for row in x.rows() {
            for y in 0..k {
                em.push(row.dot(&self.weights[y * self.dim..(y + 1) * self.dim]) + self.bias[y]);
            }
        }
        em
    }

    pub fn log_partition(&self, x: &TokenFeatureMatrix) -> Result<f64, CrfError> {
        self.check_dim(x)?;
        Ok(chain::forward(&self.emissions(x), &self.transitions, self.num_labels()).1)
    }

    fn accumulate(&self, x: &TokenFeatureMatrix, gold: &[usize], grad: &mut Gradient) -> f64 {
        let k = self.num_labels();
        let em = self.emissions(x);
        let post = chain::posteriors(&em, &self.transitions, k);
        for (t, row) in x.rows().enumerate() {
            for y in 0..k {
                let observed = if gold[t] == y { 1.0 } else { 0.0 };
                let coef = observed - post.unary[t * k + y];
                if coef != 0.0 {
                    row.axpy(coef, &mut grad.weights[y * self.dim..(y + 1) * self.dim]);
                    grad.bias[y] += coef;
                }
            }
        }
        for t in 1..gold.len() {
            grad.transitions[gold[t - 1] * k + gold[t]] += 1.0;
        }
        for (g, p) in grad.transitions.iter_mut().zip(&post.pairwise) {
            *g -= p;
        }
        chain::path_score(&em, &self.transitions, k, gold) - post.log_z
    }

    /// `log p(gold | x)` and its gradient with respect to every parameter.
    pub fn log_likelihood_and_grad(
        &self,
        x: &TokenFeatureMatrix,
        gold: &[usize],
    ) -> Result<(f64, Gradient), CrfError> {
        self.check_dim(x)?;
        if gold.len() != x.n_rows() {
            return Err(CrfError::Alignment {
                utterance: x.utterance,
                tokens: gold.len(),
                rows: x.n_rows(),
            });
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= self.num_labels()) {
            return Err(CrfError::UnknownLabel {
                utterance: x.utterance,
                tag: bad.to_string(),
            });
        }
        let mut grad = Gradient::zeros(self.num_labels(), self.dim);
        let ll = self.accumulate(x, gold, &mut grad);
        Ok((ll, grad))
    }

    pub fn viterbi_decode(&self, x: &TokenFeatureMatrix) -> Vec<usize> {
        chain::viterbi(&self.emissions(x), &self.transitions, self.num_labels()).0
    }

    pub fn decode_tags(&self, x: &TokenFeatureMatrix) -> Vec<Tag> {
        self.viterbi_decode(x)
            .into_iter()
            .map(|i| self.label_tag(i))
            .collect()
    }

    /// `n x k` per-token posterior probabilities, rows summing to one.
    pub fn posterior_marginals(&self, x: &TokenFeatureMatrix) -> Vec<f64> {
        chain::posteriors(&self.emissions(x), &self.transitions, self.num_labels()).unary
    }

    pub fn write_nsdm<W: Write>(&self, mut w: W) -> Result<(), CrfError> {
        w.write_all(NSDM_MAGIC)?;
        for v in [
            NSDM_VERSION,
            self.objective.code(),
            self.num_labels() as u32,
            self.dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self
            .weights
            .iter()
            .chain(&self.bias)
            .chain(&self.transitions)
        {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a model blob. Label names are not part of the blob and are
    /// supplied by the caller (from the benchmark schema).
    pub fn read_nsdm<R: Read>(mut r: R, labels: Vec<String>) -> Result<Self, CrfError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NSDM_MAGIC {
            return Err(CrfError::Format("bad magic".into()));
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, obj, k, d] = u32s;
        if version != NSDM_VERSION {
            return Err(CrfError::Format(format!("unsupported version {version}")));
        }
        let objective = match obj {
            0 => Objective::Binary,
            1 => Objective::Multiple,
            o => return Err(CrfError::Format(format!("unknown objective code {o}"))),
        };
        let (k, d) = (k as usize, d as usize);
        if labels.len() != k {
            return Err(CrfError::Format(format!(
                "blob has {k} labels, caller supplied {}",
                labels.len()
            )));
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>, CrfError> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weights = read_vec(k * d)?;
        let bias = read_vec(k)?;
        let transitions = read_vec(k * k)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CrfError::Format("trailing bytes".into()));
        }
        Ok(Self {
            objective,
            labels,
            dim: d,
            weights,
            bias,
            transitions,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2: f64,
    pub seed: u64,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            max_epochs: 30,
            patience: 10,
            l2: 1e-4,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CrfError> {
        let bad = |m: &str| Err(CrfError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_span_f1: f64,
    pub val_span_f1: Vec<f64>,
}

fn gold_indices(
    model: &TaggerModel,
    utts: &[LabeledUtterance],
    xs: &[TokenFeatureMatrix],
) -> Result<Vec<Vec<usize>>, CrfError> {
    if utts.len() != xs.len() {
        return Err(CrfError::CountMismatch(utts.len(), xs.len()));
    }
    utts.iter()
        .zip(xs)
        .enumerate()
        .map(|(i, (u, x))| {
            model.check_dim(x)?;
            if u.len() != x.n_rows() {
                return Err(CrfError::Alignment {
                    utterance: i,
                    tokens: u.len(),
                    rows: x.n_rows(),
                });
            }
            u.tags
                .iter()
                .map(|t| {
                    model.label_index(t).ok_or_else(|| CrfError::UnknownLabel {
                        utterance: i,
                        tag: t.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// In-domain span F1 of `model` on `val`. Positions whose gold tag is `NS`
/// are blanked to `O` on both sides so they never count.
pub fn in_domain_span_f1(
    model: &TaggerModel,
    val: &[LabeledUtterance],
    val_x: &[TokenFeatureMatrix],
    par: Parallelism,
) -> f64 {
    let preds = par.map_range(val.len(), |i| model.decode_tags(&val_x[i]));
    let mut p_all = Vec::with_capacity(val.len());
    let mut g_all = Vec::with_capacity(val.len());
    for (u, mut pred) in val.iter().zip(preds) {
        let mut gold = Vec::with_capacity(u.len());
        for (i, t) in u.tags.iter().enumerate() {
            let g = match (model.objective, t) {
                (_, Tag::Novel) => {
                    pred[i] = Tag::Outside;
                    Tag::Outside
                }
                (Objective::Binary, Tag::Outside) => Tag::Outside,
                (Objective::Binary, _) => Tag::Inside(ENTITY_LABEL.into()),
                (Objective::Multiple, t) => t.clone(),
            };
            gold.push(g);
        }
        p_all.push(pred);
        g_all.push(gold);
    }
    let counts = span_counts(&p_all, &g_all).expect("aligned by construction");
    micro(&counts, &ClassFilter::InDomain).f1
}

/// Mini-batch gradient ascent on the mean log-likelihood with an L2 penalty
/// on weights and transitions. Early stopping tracks in-domain span F1 on
/// `val` and returns the best epoch's parameters.
pub fn train(
    objective: Objective,
    schema: &SlotSchema,
    train: &[LabeledUtterance],
    train_x: &[TokenFeatureMatrix],
    val: &[LabeledUtterance],
    val_x: &[TokenFeatureMatrix],
    cfg: &TrainConfig,
) -> Result<(TaggerModel, TrainingReport), CrfError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CrfError::EmptyTrain);
    }
    let dim = train_x[0].dim();
    let mut model = TaggerModel::zeros(objective, objective.labels(schema), dim);
    let gold = gold_indices(&model, train, train_x)?;
    if val.len() != val_x.len() {
        return Err(CrfError::CountMismatch(val.len(), val_x.len()));
    }
    for x in val_x {
        model.check_dim(x)?;
    }

    let k = model.num_labels();
    let par = cfg.parallelism;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let partials = par.map(&chunks, |chunk| {
                let mut g = Gradient::zeros(k, dim);
                for &i in chunk.iter() {
                    model.accumulate(&train_x[i], &gold[i], &mut g);
                }
                g
            });
            let mut grad = Gradient::zeros(k, dim);
            for p in &partials {
                grad.add(p);
            }
            let scale = 1.0 / batch.len() as f64;
            let lr = cfg.learning_rate;
            for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
                *w += lr * (g * scale - cfg.l2 * *w);
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b += lr * g * scale;
            }
            for (a, g) in model.transitions.iter_mut().zip(&grad.transitions) {
                *a += lr * (g * scale - cfg.l2 * *a);
            }
        }
        let f1 = in_domain_span_f1(&model, val, val_x, par);
        history.push(f1);
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((
        best,
        TrainingReport {
            epochs_run: history.len(),
            best_epoch,
            best_val_span_f1: best_f1,
            val_span_f1: history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_conll;
    use crate::features::{hash_corpus, HashedFeatureSpec};
    use proptest::prelude::*;

    fn two_tag_model(d: usize) -> TaggerModel {
        TaggerModel::zeros(Objective::Binary, vec!["O".into(), ENTITY_LABEL.into()], d)
    }

    #[test]
    fn single_token_partition() {
        let mut m = two_tag_model(2);
        m.weights = vec![0.3, -0.2, 1.1, 0.5];
        m.bias = vec![0.1, -0.4];
        m.transitions = vec![5.0, -3.0, 2.0, 7.0];
        let x = TokenFeatureMatrix::dense(0, 2, vec![1.0, 2.0]).unwrap();
        let s_o: f64 = 0.3 - 0.4 + 0.1;
        let s_e: f64 = 1.1 + 1.0 - 0.4;
        let log_z = (s_o.exp() + s_e.exp()).ln();
        assert!((m.log_partition(&x).unwrap() - log_z).abs() < 1e-12);
        let (ll, _) = m.log_likelihood_and_grad(&x, &[1]).unwrap();
        assert!((ll - (s_e - log_z)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let m = two_tag_model(3);
        let x = TokenFeatureMatrix::dense(0, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            m.log_likelihood_and_grad(&x, &[0]),
            Err(CrfError::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn zero_transitions_decouple() {
        let mut m = TaggerModel::zeros(Objective::Binary, vec!["O".into(), "ENT".into()], 1);
        m.weights = vec![1.0, -1.0];
        let x = TokenFeatureMatrix::dense(0, 1, vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(m.viterbi_decode(&x), vec![0, 1, 0]);
        let marg = m.posterior_marginals(&x);
        for (t, xv) in [2.0f64, -1.0, 0.5].iter().enumerate() {
            let (a, b) = (*xv, -*xv);
            let p0 = a.exp() / (a.exp() + b.exp());
            assert!((marg[t * 2] - p0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_chain_is_uniform() {
        let mut m = two_tag_model(1);
        m.weights = vec![0.7, 0.7];
        m.transitions = vec![0.4, -0.2, -0.2, 0.4];
        let x = TokenFeatureMatrix::dense(0, 1, vec![1.0, 3.0, -2.0, 0.5]).unwrap();
        for p in m.posterior_marginals(&x) {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dominating_transition_steers_decode() {
        // Tags: O, B-x, I-x. Emissions alone would pick O then I-x, but O->I-x
        // is heavily penalised, so the decoder pays to start with B-x.
        let labels = vec!["O".into(), "B-x".into(), "I-x".into()];
        let mut m = TaggerModel::zeros(Objective::Multiple, labels, 2);
        m.weights = vec![
            1.0, 0.0, // O
            0.6, 0.0, // B-x
            0.0, 1.0, // I-x
        ];
        m.transitions[2] = -100.0;
        let x = TokenFeatureMatrix::dense(0, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let em = m.emissions(&x);
        let greedy: Vec<usize> = (0..2)
            .map(|t| {
                (0..3)
                    .max_by(|&a, &b| em[t * 3 + a].partial_cmp(&em[t * 3 + b]).unwrap())
                    .unwrap()
            })
            .collect();
        assert_eq!(greedy, vec![0, 2]);
        assert_eq!(m.viterbi_decode(&x), vec![1, 2]);
    }

    #[test]
    fn viterbi_ties_take_lowest_index() {
        let m = TaggerModel::zeros(Objective::Binary, vec!["O".into(), "ENT".into()], 1);
        let x = TokenFeatureMatrix::dense(0, 1, vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.viterbi_decode(&x), vec![0, 0, 0]);
    }

    #[test]
    fn nsdm_round_trip() {
        let mut m = TaggerModel::zeros(
            Objective::Multiple,
            vec!["O".into(), "B-a".into(), "I-a".into()],
            4,
        );
        for (i, w) in m.weights.iter_mut().enumerate() {
            *w = i as f64 * 0.37 - 1.0;
        }
        m.bias = vec![0.5, -0.25, 1e-9];
        m.transitions[4] = -3.5;
        let mut buf = Vec::new();
        m.write_nsdm(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 8 * (12 + 3 + 9));
        let back = TaggerModel::read_nsdm(buf.as_slice(), m.labels.clone()).unwrap();
        assert_eq!(back, m);
        assert!(TaggerModel::read_nsdm(buf.as_slice(), vec!["O".into()]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(TaggerModel::read_nsdm(bad.as_slice(), m.labels.clone()).is_err());
    }

    fn toy_corpus() -> (Vec<LabeledUtterance>, SlotSchema) {
        let text = "\
play O\njazz B-genre\nmusic O\n\n\
play O\nrock B-genre\nnow O\n\n\
book O\nparis B-city\nhotel O\n\n\
book O\nrome B-city\ntrip O\n\n\
find O\nnew B-city\nyork I-city\n\n\
play O\nsoft B-genre\npop I-genre\n\n";
        let utts = parse_conll(text).unwrap();
        let schema = SlotSchema::from_types(["genre", "city"]);
        (utts, schema)
    }

    #[test]
    fn separable_corpus_reaches_full_f1() {
        let (utts, schema) = toy_corpus();
        let spec = HashedFeatureSpec::new(256);
        let xs = hash_corpus(&utts, &spec, Parallelism::Sequential);
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (model, report) =
            train(Objective::Multiple, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        assert_eq!(report.best_val_span_f1, 100.0, "{report:?}");
        assert!(report.best_epoch <= 50);
        assert_eq!(
            in_domain_span_f1(&model, &utts, &xs, Parallelism::Sequential),
            100.0
        );

        let (bin, bin_report) =
            train(Objective::Binary, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        assert_eq!(bin.num_labels(), 2);
        assert_eq!(bin_report.best_val_span_f1, 100.0);
    }

    #[test]
    fn zero_learning_rate_stops_early_unchanged() {
        let (utts, schema) = toy_corpus();
        let xs = hash_corpus(&utts, &HashedFeatureSpec::new(64), Parallelism::Sequential);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 1,
            ..TrainConfig::default()
        };
        let (model, report) =
            train(Objective::Multiple, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        assert_eq!(report.epochs_run, 2);
        let zero = TaggerModel::zeros(Objective::Multiple, Objective::Multiple.labels(&schema), 64);
        assert_eq!(model, zero);
    }

    #[test]
    fn training_is_deterministic_across_policies() {
        let (utts, schema) = toy_corpus();
        let xs = hash_corpus(&utts, &HashedFeatureSpec::new(128), Parallelism::Sequential);
        let mut cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(Objective::Multiple, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        let b = train(Objective::Multiple, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        cfg.parallelism = Parallelism::Sequential;
        let c = train(Objective::Multiple, &schema, &utts, &xs, &utts, &xs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn unknown_train_label_is_reported() {
        let (mut utts, schema) = toy_corpus();
        utts[0].tags[1] = Tag::Begin("artist".into());
        let xs = hash_corpus(&utts, &HashedFeatureSpec::new(64), Parallelism::Sequential);
        let err = train(
            Objective::Multiple,
            &schema,
            &utts,
            &xs,
            &utts,
            &xs,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CrfError::UnknownLabel { utterance: 0, .. }));
    }

    #[test]
    fn binary_labels() {
        let schema = SlotSchema::from_types(["a", "b"]);
        assert_eq!(Objective::Binary.labels(&schema).len(), 2);
        assert_eq!(Objective::Multiple.labels(&schema).len(), 5);
        let m = TaggerModel::zeros(Objective::Binary, Objective::Binary.labels(&schema), 1);
        assert_eq!(m.label_index(&Tag::Begin("a".into())), Some(1));
        assert_eq!(m.label_index(&Tag::Outside), Some(0));
        assert_eq!(m.label_index(&Tag::Novel), None);
    }

    fn random_instance(seed: u64) -> (Vec<f64>, Vec<f64>, usize) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..6);
        let em = (0..n * k)
            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
            .collect();
        let tr = (0..k * k)
            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
            .collect();
        (em, tr, k)
    }

    proptest! {
        #[test]
        fn partition_dominates_every_path(seed in any::<u64>(), path_seed in any::<u64>()) {
            use rand::Rng;
            let (em, tr, k) = random_instance(seed);
            let n = em.len() / k;
            let (_, log_z) = chain::forward(&em, &tr, k);
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed);
            let path: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            prop_assert!(log_z >= chain::path_score(&em, &tr, k, &path));
        }

        #[test]
        fn marginal_rows_are_distributions(seed in any::<u64>()) {
            let (em, tr, k) = random_instance(seed);
            let post = chain::posteriors(&em, &tr, k);
            for row in post.unary.chunks(k) {
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn emission_shift_invariance(seed in any::<u64>(), pos in 0usize..6, c in -50.0f64..50.0) {
            let (em, tr, k) = random_instance(seed);
            let n = em.len() / k;
            let pos = pos % n;
            let mut shifted = em.clone();
            for y in 0..k {
                shifted[pos * k + y] += c;
            }
            prop_assert_eq!(chain::viterbi(&em, &tr, k).0, chain::viterbi(&shifted, &tr, k).0);
            let a = chain::posteriors(&em, &tr, k).unary;
            let b = chain::posteriors(&shifted, &tr, k).unary;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
