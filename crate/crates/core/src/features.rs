//! Per-token feature vectors: hashed lexical templates or precomputed
//! contextual embeddings read from NSDE files.
//!
//! NSDE layout (all integers little-endian `u32`):
//!
//! ```text
//! "NSDE" | version=1 | d | utterance count
//! per utterance: token count n, then n*d little-endian f32, row-major
//! ```

use std::fmt;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledUtterance;
use crate::exec::Parallelism;

pub const NSDE_MAGIC: &[u8; 4] = b"NSDE";
pub const NSDE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("embedding file format error: {0}")]
    Format(String),
    #[error("embedding file does not align with the corpus at utterance {utterance}")]
    Alignment { utterance: usize },
    #[error("non-finite value in utterance {utterance}, row {row}")]
    NonFiniteValue { utterance: usize, row: usize },
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Borrowed view of one feature row.
#[derive(Clone, Copy, Debug)]
pub enum RowView<'a> {
    Dense(&'a [f64]),
    Sparse(&'a [(u32, f64)]),
}

impl RowView<'_> {
    pub fn dot(&self, w: &[f64]) -> f64 {
        match self {
            RowView::Dense(x) => x.iter().zip(w).map(|(a, b)| a * b).sum(),
            RowView::Sparse(x) => x.iter().map(|&(i, v)| v * w[i as usize]).sum(),
        }
    }

    /// `out += scale * row`
    pub fn axpy(&self, scale: f64, out: &mut [f64]) {
        match self {
            RowView::Dense(x) => {
                for (o, v) in out.iter_mut().zip(x.iter()) {
                    *o += scale * v;
                }
            }
            RowView::Sparse(x) => {
                for &(i, v) in x.iter() {
                    out[i as usize] += scale * v;
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        match self {
            RowView::Dense(x) => x.to_vec(),
            RowView::Sparse(x) => {
                let mut out = vec![0.0; dim];
                for &(i, v) in x.iter() {
                    out[i as usize] += v;
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Rows {
    Dense(Vec<f64>),
    Sparse(Vec<Vec<(u32, f64)>>),
}

/// Feature vectors of one utterance; row `i` belongs to token `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatureMatrix {
    pub utterance: usize,
    dim: usize,
    n: usize,
    rows: Rows,
}

impl TokenFeatureMatrix {
    /// Dense `n x dim` matrix, row-major.
    pub fn dense(utterance: usize, dim: usize, values: Vec<f64>) -> Result<Self, FeatureError> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteValue {
                utterance,
                row: pos / dim,
            });
        }
        Ok(Self {
            utterance,
            dim,
            n: values.len() / dim,
            rows: Rows::Dense(values),
        })
    }

    /// Sparse rows of `(index, value)`; duplicate indices are summed.
    pub fn sparse(
        utterance: usize,
        dim: usize,
        rows: Vec<Vec<(u32, f64)>>,
    ) -> Result<Self, FeatureError> {
        let mut merged = Vec::with_capacity(rows.len());
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(i, _)| i);
            let mut out: Vec<(u32, f64)> = Vec::with_capacity(row.len());
            for (i, v) in row {
                if i as usize >= dim {
                    return Err(FeatureError::DimensionMismatch {
                        expected: dim,
                        found: i as usize + 1,
                    });
                }
                if !v.is_finite() {
                    return Err(FeatureError::NonFiniteValue { utterance, row: r });
                }
                match out.last_mut() {
                    Some(last) if last.0 == i => last.1 += v,
                    _ => out.push((i, v)),
                }
            }
            merged.push(out);
        }
        Ok(Self {
            utterance,
            dim,
            n: merged.len(),
            rows: Rows::Sparse(merged),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.rows, Rows::Sparse(_))
    }

    pub fn row(&self, i: usize) -> RowView<'_> {
        match &self.rows {
            Rows::Dense(v) => RowView::Dense(&v[i * self.dim..(i + 1) * self.dim]),
            Rows::Sparse(r) => RowView::Sparse(&r[i]),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = RowView<'_>> {
        (0..self.n).map(|i| self.row(i))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.dim);
        for r in self.rows() {
            out.extend(r.to_dense(self.dim));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    WordIdentity,
    LowercasedWord,
    Prefix(u8),
    Suffix(u8),
    ContainsDigit,
    IsCapitalized,
    PreviousWord,
    NextWord,
}

impl Template {
    pub fn all() -> Vec<Template> {
        vec![
            Template::WordIdentity,
            Template::LowercasedWord,
            Template::Prefix(1),
            Template::Prefix(2),
            Template::Prefix(3),
            Template::Suffix(1),
            Template::Suffix(2),
            Template::Suffix(3),
            Template::ContainsDigit,
            Template::IsCapitalized,
            Template::PreviousWord,
            Template::NextWord,
        ]
    }

    fn id(self) -> u8 {
        match self {
            Template::WordIdentity => 0,
            Template::LowercasedWord => 1,
            Template::Prefix(k) => 10 + k,
            Template::Suffix(k) => 20 + k,
            Template::ContainsDigit => 2,
            Template::IsCapitalized => 3,
            Template::PreviousWord => 4,
            Template::NextWord => 5,
        }
    }
}

const BOS: &str = "<s>";
const EOS: &str = "</s>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedFeatureSpec {
    pub dimension: usize,
    #[serde(default = "Template::all")]
    pub templates: Vec<Template>,
    #[serde(default)]
    pub seed: u64,
}

impl HashedFeatureSpec {
    /// All templates, hash seed 0.
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            templates: Template::all(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.dimension < 16 {
            return Err(FeatureError::InvalidSpec(format!(
                "dimension {} is below the minimum of 16",
                self.dimension
            )));
        }
        if self.dimension > u32::MAX as usize {
            return Err(FeatureError::InvalidSpec("dimension too large".into()));
        }
        if self.templates.is_empty() {
            return Err(FeatureError::InvalidSpec("no active templates".into()));
        }
        Ok(())
    }

    /// Bucket of one `(template, value)` firing.
    pub fn index(&self, template: Template, value: &str) -> u32 {
        // FNV-1a, 64-bit.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for b in self.seed.to_le_bytes() {
            eat(b);
        }
        eat(template.id());
        eat(0xff);
        for b in value.bytes() {
            eat(b);
        }
        (h % self.dimension as u64) as u32
    }
}

fn prefix(word: &str, k: usize) -> Option<&str> {
    word.char_indices()
        .nth(k)
        .map(|(i, _)| &word[..i])
        .or_else(|| (word.chars().count() == k).then_some(word))
}

fn suffix(word: &str, k: usize) -> Option<&str> {
    let n = word.chars().count();
    if n < k {
        return None;
    }
    word.char_indices().nth(n - k).map(|(i, _)| &word[i..])
}

/// Indicator features of one utterance. Every active template that fires
/// adds 1.0 at its hashed index.
pub fn hash_features(
    utterance: usize,
    utt: &LabeledUtterance,
    spec: &HashedFeatureSpec,
) -> TokenFeatureMatrix {
    let lower: Vec<String> = utt.tokens.iter().map(|t| t.to_lowercase()).collect();
    let rows = (0..utt.len())
        .map(|i| {
            let word = utt.tokens[i].as_str();
            let lw = lower[i].as_str();
            let mut row = Vec::with_capacity(spec.templates.len());
            for &t in &spec.templates {
                let value = match t {
                    Template::WordIdentity => Some(word),
                    Template::LowercasedWord => Some(lw),
                    Template::Prefix(k) => prefix(lw, k as usize),
                    Template::Suffix(k) => suffix(lw, k as usize),
                    Template::ContainsDigit => {
                        word.chars().any(|c| c.is_ascii_digit()).then_some("")
                    }
                    Template::IsCapitalized => {
                        word.chars().next().filter(|c| c.is_uppercase()).map(|_| "")
                    }
                    Template::PreviousWord => {
                        Some(if i == 0 { BOS } else { lower[i - 1].as_str() })
                    }
                    Template::NextWord => Some(lower.get(i + 1).map_or(EOS, String::as_str)),
                };
                if let Some(v) = value {
                    row.push((spec.index(t, v), 1.0));
                }
            }
            row
        })
        .collect();
    TokenFeatureMatrix::sparse(utterance, spec.dimension, rows)
        .expect("hashed indices are in range")
}

pub fn hash_corpus(
    utterances: &[LabeledUtterance],
    spec: &HashedFeatureSpec,
    par: Parallelism,
) -> Vec<TokenFeatureMatrix> {
    par.map_range(utterances.len(), |i| hash_features(i, &utterances[i], spec))
}

/// Where token features come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSource {
    Hashed(HashedFeatureSpec),
    /// Directory holding `train.nsde`, `val.nsde` and `test.nsde`.
    File {
        path: PathBuf,
    },
}

impl FeatureSource {
    pub fn default_learning_rate(&self) -> f64 {
        match self {
            FeatureSource::Hashed(_) => 0.1,
            FeatureSource::File { .. } => 0.01,
        }
    }
}

impl FromStr for FeatureSource {
    type Err = FeatureError;

    /// `hashed:d=4096[,seed=N]` or `file:PATH`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(FeatureSource::File { path: path.into() });
        }
        let rest = s
            .strip_prefix("hashed")
            .ok_or_else(|| FeatureError::InvalidSpec(format!("unknown feature source {s:?}")))?;
        let mut spec = HashedFeatureSpec::new(4096);
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| FeatureError::InvalidSpec(format!("bad option {kv:?}")))?;
            let parse = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| FeatureError::InvalidSpec(format!("bad value {v:?} for {k}")))
            };
            match k {
                "d" => spec.dimension = parse(v)? as usize,
                "seed" => spec.seed = parse(v)?,
                _ => return Err(FeatureError::InvalidSpec(format!("unknown option {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(FeatureSource::Hashed(spec))
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Hashed(s) if s.seed == 0 => write!(f, "hashed:d={}", s.dimension),
            FeatureSource::Hashed(s) => write!(f, "hashed:d={},seed={}", s.dimension, s.seed),
            FeatureSource::File { path } => write!(f, "file:{}", path.display()),
        }
    }
}

/// Writes matrices in NSDE format. All matrices must share `dim`.
pub fn write_embeddings<W: Write>(
    mut w: W,
    dim: usize,
    matrices: &[TokenFeatureMatrix],
) -> Result<(), FeatureError> {
    w.write_all(NSDE_MAGIC)?;
    w.write_all(&NSDE_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(matrices.len() as u32).to_le_bytes())?;
    for m in matrices {
        if m.dim() != dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                found: m.dim(),
            });
        }
        w.write_all(&(m.n_rows() as u32).to_le_bytes())?;
        for v in m.to_dense() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FeatureError::Format("truncated file".into()),
        _ => FeatureError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads an NSDE stream, checking it against the token counts of `corpus`.
pub fn read_embeddings<R: Read>(
    mut r: R,
    corpus: &[LabeledUtterance],
) -> Result<Vec<TokenFeatureMatrix>, FeatureError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| FeatureError::Format("missing magic".into()))?;
    if &magic != NSDE_MAGIC {
        return Err(FeatureError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != NSDE_VERSION {
        return Err(FeatureError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(FeatureError::Format("zero dimension".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(corpus.len()));
    let mut buf = Vec::new();
    for i in 0..count {
        let n = read_u32(&mut r)? as usize;
        if corpus.get(i).map(LabeledUtterance::len) != Some(n) {
            return Err(FeatureError::Alignment { utterance: i });
        }
        buf.resize(n * dim * 4, 0);
        r.read_exact(&mut buf)
            .map_err(|_| FeatureError::Format("truncated file".into()))?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(TokenFeatureMatrix::dense(i, dim, values)?);
    }
    if count < corpus.len() {
        return Err(FeatureError::Alignment { utterance: count });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FeatureError::Format(
            "trailing bytes after last utterance".into(),
        ));
    }
    Ok(out)
}

pub fn load_embeddings(
    path: &Path,
    corpus: &[LabeledUtterance],
) -> Result<Vec<TokenFeatureMatrix>, FeatureError> {
    let f = std::fs::File::open(path)?;
    read_embeddings(io::BufReader::new(f), corpus)
}
