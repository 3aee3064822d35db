//! Independent reference oracles for the toolkit: brute-force CRF path
//! enumeration, finite differences, closed-form Gaussian distances, a
//! recorded conlleval run and dataset-level statistics. Each check returns
//! `Ok(detail)` or `Err(detail)`.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nsd_core::benchmark::benchmark_stats;
use nsd_core::crf::chain;
use nsd_core::detect::{
    gda_fit, msp_detect, DetectObjective, DetectorSpec, DistanceMetric, GdaSample, Method,
};
use nsd_core::experiment::{load_corpus_dir, run_experiment, CorpusSource, ExperimentConfig};
use nsd_core::metrics::{
    micro, parse_predictions, rose, span_counts, ClassFilter, Prf, ROSE_LEVELS,
};
use nsd_core::{
    build_benchmark, compute_stats, derive_schema, CasePolicy, DetectorConfig, GdaModel, NsdConfig,
    Objective, Strategy, Tag, TaggerModel, TokenFeatureMatrix, UnknownSelection,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../validation/fixtures")
        .join(name)
}

/// Every label sequence of length `n` over `k` labels.
pub fn all_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn score(em: &[f64], tr: &[f64], k: usize, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += em[t * k + y];
        if t > 0 {
            s += tr[path[t - 1] * k + y];
        }
    }
    s
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Brute-force log partition, best score, unary and pairwise marginals.
pub struct Brute {
    pub log_z: f64,
    pub best: f64,
    pub unary: Vec<f64>,
    pub pairwise: Vec<f64>,
}

pub fn brute(em: &[f64], tr: &[f64], n: usize, k: usize) -> Brute {
    let paths = all_paths(n, k);
    let scores: Vec<f64> = paths.iter().map(|p| score(em, tr, k, p)).collect();
    let log_z = log_sum_exp(&scores);
    let mut unary = vec![0.0; n * k];
    let mut pairwise = vec![0.0; k * k];
    for (p, s) in paths.iter().zip(&scores) {
        let w = (s - log_z).exp();
        for (t, &y) in p.iter().enumerate() {
            unary[t * k + y] += w;
            if t > 0 {
                pairwise[p[t - 1] * k + y] += w;
            }
        }
    }
    Brute {
        log_z,
        best: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        unary,
        pairwise,
    }
}

/// Random chain with `n <= 6`, `k <= 5` and N(0, 1) parameters.
pub fn random_chain(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=5);
    let em = normals(rng, n * k);
    let tr = normals(rng, k * k);
    (n, k, em, tr)
}

pub fn crf_partition_oracle(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let (n, k, em, tr) = random_chain(&mut r);
        let b = brute(&em, &tr, n, k);
        let (_, log_z) = chain::forward(&em, &tr, k);
        let (path, best) = chain::viterbi(&em, &tr, k);
        let path_best = score(&em, &tr, k, &path);
        let ez = (log_z - b.log_z).abs();
        let ev = (best - b.best).abs().max((path_best - b.best).abs());
        worst_z = worst_z.max(ez);
        worst_v = worst_v.max(ev);
        if ez >= 1e-8 || ev >= 1e-8 {
            return Err(format!(
                "instance {i} (n={n}, k={k}): |logZ err| {ez:.3e}, |viterbi err| {ev:.3e}"
            ));
        }
    }
    Ok(format!(
        "{instances} instances, max |logZ err| {worst_z:.2e}, max |viterbi err| {worst_v:.2e}"
    ))
}

pub fn crf_marginal_oracle(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let (n, k, em, tr) = random_chain(&mut r);
        let b = brute(&em, &tr, n, k);
        let post = chain::posteriors(&em, &tr, k);
        for (a, e) in post
            .unary
            .iter()
            .zip(&b.unary)
            .chain(post.pairwise.iter().zip(&b.pairwise))
        {
            worst = worst.max((a - e).abs());
        }
        for row in post.unary.chunks(k) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if worst >= 1e-8 || worst_row > 1e-9 {
            return Err(format!(
                "instance {i} (n={n}, k={k}): marginal err {worst:.3e}, row-sum err {worst_row:.3e}"
            ));
        }
    }
    Ok(format!(
        "{instances} instances, max marginal err {worst:.2e}, max row-sum err {worst_row:.2e}"
    ))
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Random multiple-objective tagger over dense `d`-dimensional features.
pub fn random_tagger(rng: &mut ChaCha8Rng, k: usize, d: usize) -> TaggerModel {
    let labels = (0..k).map(|i| format!("B-t{i}")).collect();
    let mut m = TaggerModel::zeros(Objective::Multiple, labels, d);
    m.weights = normals(rng, k * d);
    m.bias = normals(rng, k);
    m.transitions = normals(rng, k * k);
    m
}

type ParamBlock<'a> = (fn(&mut TaggerModel) -> &mut Vec<f64>, &'a Vec<f64>);

pub fn crf_gradient_check(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..instances {
        let n = r.random_range(1..=6);
        let k = r.random_range(1..=5);
        let d = r.random_range(1..=4);
        let model = random_tagger(&mut r, k, d);
        let x = TokenFeatureMatrix::dense(i, d, normals(&mut r, n * d)).unwrap();
        let gold: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let (_, grad) = model.log_likelihood_and_grad(&x, &gold).unwrap();
        let ll = |m: &TaggerModel| m.log_likelihood_and_grad(&x, &gold).unwrap().0;
        let blocks: [ParamBlock<'_>; 3] = [
            (|m| &mut m.weights, &grad.weights),
            (|m| &mut m.bias, &grad.bias),
            (|m| &mut m.transitions, &grad.transitions),
        ];
        for (access, analytic) in blocks {
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                access(&mut plus)[j] += h;
                let mut minus = model.clone();
                access(&mut minus)[j] -= h;
                let num = (ll(&plus) - ll(&minus)) / (2.0 * h);
                let e = relative_error(a, num);
                worst = worst.max(e);
                if e >= 1e-4 {
                    return Err(format!(
                        "instance {i} parameter {j}: analytic {a}, numeric {num}, rel err {e:.3e}"
                    ));
                }
            }
        }
    }
    Ok(format!(
        "{instances} instances, max relative error {worst:.2e}"
    ))
}

/// Parses per-class and overall precision/recall/F1 from conlleval output.
pub fn parse_conlleval(text: &str) -> (BTreeMap<String, [f64; 3]>, [f64; 3], [usize; 3]) {
    let num = |s: &str| {
        s.trim()
            .trim_end_matches(['%', ';'])
            .parse::<f64>()
            .unwrap()
    };
    let mut per_class = BTreeMap::new();
    let mut overall = [0.0; 3];
    let mut counts = [0; 3];
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if line.starts_with("processed") {
            counts = [
                num(fields[1]) as usize,
                num(fields[4]) as usize,
                num(fields[7]) as usize,
            ];
        } else if line.starts_with("accuracy") {
            overall = [num(fields[3]), num(fields[5]), num(fields[7])];
        } else if fields.len() >= 8 {
            let label = fields[0].trim_end_matches(':').to_string();
            per_class.insert(label, [num(fields[2]), num(fields[4]), num(fields[6])]);
        }
    }
    (per_class, overall, counts)
}

pub fn conlleval_equivalence() -> Check {
    let text =
        std::fs::read_to_string(fixture("conlleval/malformed.txt")).map_err(|e| e.to_string())?;
    let reference = std::fs::read_to_string(fixture("conlleval/reference_output.txt"))
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let utts = parse_predictions(&text).map_err(|e| e.to_string())?;
    let pred: Vec<&[Tag]> = utts.iter().map(|u| u.pred.as_slice()).collect();
    let gold: Vec<&[Tag]> = utts.iter().map(|u| u.gold.as_slice()).collect();
    let counts = span_counts(&pred, &gold).map_err(|e| e.to_string())?;
    let overall = micro(&counts, &ClassFilter::All);
    let elapsed = start.elapsed();
    let (ref_classes, ref_overall, ref_counts) = parse_conlleval(&reference);
    let tokens: usize = utts.iter().map(|u| u.tokens.len()).sum();
    let ours = [tokens, overall.counts.gold, overall.counts.pred];
    let expected = [ref_counts[0], ref_counts[1], ref_counts[2]];
    if ours != expected || overall.counts.tp != correct_phrases(&reference) {
        return Err(format!(
            "counts {ours:?} tp {} vs reference {expected:?}",
            overall.counts.tp
        ));
    }
    let triple = |p: &Prf| [p.precision, p.recall, p.f1];
    let mut worst = 0.0f64;
    let mut compare = |name: &str, ours: [f64; 3], theirs: [f64; 3]| -> Result<(), String> {
        for (a, b) in ours.iter().zip(&theirs) {
            let e = (a - b).abs();
            worst = worst.max(e);
            if e >= 1e-6 {
                return Err(format!("{name}: ours {ours:?}, reference {theirs:?}"));
            }
        }
        Ok(())
    };
    compare("overall", triple(&overall), ref_overall)?;
    if ref_classes.len() != counts.len() {
        return Err(format!(
            "{} classes vs {} in reference",
            counts.len(),
            ref_classes.len()
        ));
    }
    for (label, theirs) in &ref_classes {
        let c = counts
            .get(label)
            .ok_or_else(|| format!("class {label} missing"))?;
        compare(label, triple(&Prf::from_counts(*c)), *theirs)?;
    }
    if elapsed.as_secs_f64() >= 1.0 {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "{} utterances, {} classes, max abs diff {worst:.1e}, {elapsed:.2?}",
        utts.len(),
        ref_classes.len()
    ))
}

fn correct_phrases(reference: &str) -> usize {
    reference
        .lines()
        .find(|l| l.starts_with("processed"))
        .and_then(|l| l.rsplit("correct:").next())
        .map(|s| s.trim().trim_end_matches('.').parse().unwrap())
        .unwrap()
}

/// Two 2-D Gaussians with a shared covariance.
pub const TRUE_MEANS: [[f64; 2]; 2] = [[0.0, 0.0], [3.0, 1.0]];
pub const TRUE_COV: [[f64; 2]; 2] = [[2.0, 0.6], [0.6, 1.0]];

pub fn two_gaussians(
    per_class: usize,
    seed: u64,
) -> (Vec<TokenFeatureMatrix>, Vec<Vec<Option<usize>>>) {
    let mut r = rng(seed);
    let l11 = TRUE_COV[0][0].sqrt();
    let l21 = TRUE_COV[1][0] / l11;
    let l22 = (TRUE_COV[1][1] - l21 * l21).sqrt();
    let chunk = 100;
    let mut feats = Vec::new();
    let mut classes = Vec::new();
    for (c, mu) in TRUE_MEANS.iter().enumerate() {
        let mut left = per_class;
        while left > 0 {
            let n = chunk.min(left);
            let mut values = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let z = normals(&mut r, 2);
                values.push(mu[0] + l11 * z[0]);
                values.push(mu[1] + l21 * z[0] + l22 * z[1]);
            }
            feats.push(TokenFeatureMatrix::dense(feats.len(), 2, values).unwrap());
            classes.push(vec![Some(c); n]);
            left -= n;
        }
    }
    (feats, classes)
}

fn closed_form_mahalanobis(cov: [[f64; 2]; 2], mu: [f64; 2], x: [f64; 2]) -> f64 {
    let [[a, b], [_, c]] = cov;
    let det = a * c - b * b;
    let (dx, dy) = (x[0] - mu[0], x[1] - mu[1]);
    ((c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det).sqrt()
}

fn matrix(m: [[f64; 2]; 2]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
}

pub fn gda_oracle(per_class: usize, seed: u64) -> Check {
    let (feats, classes) = two_gaussians(per_class, seed);
    let labels = vec!["a".to_string(), "b".to_string()];
    let model = gda_fit(
        GdaSample {
            features: &feats,
            classes: &classes,
        },
        labels.clone(),
        None,
        DistanceMetric::Mahalanobis,
    )
    .map_err(|e| e.to_string())?;
    let mut fit_err = 0.0f64;
    for (m, t) in model.means.iter().zip(TRUE_MEANS) {
        for j in 0..2 {
            fit_err = fit_err.max((m[j] - t[j]).abs());
        }
    }
    for (i, row) in TRUE_COV.iter().enumerate() {
        for (j, truth) in row.iter().enumerate() {
            let unregularised = model.covariance[(i, j)] - if i == j { model.ridge } else { 0.0 };
            fit_err = fit_err.max((unregularised - truth).abs());
        }
    }
    if fit_err >= 0.05 {
        return Err(format!("fitted parameters off by {fit_err:.4}"));
    }

    let means: Vec<DVector<f64>> = TRUE_MEANS
        .iter()
        .map(|m| DVector::from_row_slice(m))
        .collect();
    let exact = GdaModel::from_parts(
        labels.clone(),
        means.clone(),
        matrix(TRUE_COV),
        0.0,
        DistanceMetric::Mahalanobis,
    )
    .map_err(|e| e.to_string())?;
    let mut r = rng(seed ^ 0x5eed);
    let mut dist_err = 0.0f64;
    for _ in 0..200 {
        let p = normals(&mut r, 2)
            .iter()
            .map(|v| 4.0 * v)
            .collect::<Vec<_>>();
        let probe = TokenFeatureMatrix::dense(0, 2, p.clone()).unwrap();
        let got = exact.distances(probe.row(0));
        for (c, mu) in TRUE_MEANS.iter().enumerate() {
            let want = closed_form_mahalanobis(TRUE_COV, *mu, [p[0], p[1]]);
            dist_err = dist_err.max((got[c] - want).abs());
        }
    }
    if dist_err >= 1e-9 {
        return Err(format!("closed-form distance error {dist_err:.3e}"));
    }

    let mut unequal = 0;
    for d in [2usize, 5] {
        let means: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_vec(normals(&mut r, d)))
            .collect();
        let build = |metric| {
            GdaModel::from_parts(
                vec!["a".into(), "b".into(), "c".into()],
                means.clone(),
                DMatrix::identity(d, d),
                0.0,
                metric,
            )
            .unwrap()
        };
        let (maha, eucl) = (
            build(DistanceMetric::Mahalanobis),
            build(DistanceMetric::Euclidean),
        );
        for _ in 0..500 {
            let probe = TokenFeatureMatrix::dense(0, d, normals(&mut r, d)).unwrap();
            if maha.distances(probe.row(0)) != eucl.distances(probe.row(0)) {
                unequal += 1;
            }
        }
    }
    if unequal > 0 {
        return Err(format!(
            "{unequal} probes differ between metrics with identity covariance"
        ));
    }
    Ok(format!(
        "N={per_class}/class fit err {fit_err:.4}, closed-form err {dist_err:.1e}, identity-covariance probes equal"
    ))
}

pub fn binary_dead_zone(pairs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let binary = DetectorSpec {
        method: Method::Msp,
        objective: DetectObjective::Binary,
        distance: None,
    };
    let combined = DetectorSpec {
        objective: DetectObjective::BinaryMultiple,
        ..binary
    };
    for i in 0..pairs {
        let p: f64 = match i {
            0 => 0.5,
            1 => 0.0,
            2 => 1.0,
            _ => r.random(),
        };
        let theta: f64 = if i % 7 == 0 {
            0.5
        } else {
            r.random::<f64>() * 0.5
        };
        let row = [p, 1.0 - p];
        let multi: Vec<f64> = {
            let m: f64 = r.random();
            vec![m, 1.0 - m]
        };
        let alone = msp_detect(Some(&row), None, 1, &DetectorConfig::new(binary, theta))
            .map_err(|e| e.to_string())?;
        let with_multiple = msp_detect(
            Some(&row),
            Some(&multi),
            1,
            &DetectorConfig {
                spec: combined,
                threshold: 1.1,
                binary_threshold: Some(theta),
            },
        )
        .map_err(|e| e.to_string())?;
        if alone[0] || with_multiple[0] {
            return Err(format!("flagged at p={p}, theta={theta}"));
        }
    }
    Ok(format!("{pairs} probability pairs, none flagged"))
}

/// Maximal runs of `NS` as `(start, end)` inclusive.
pub fn ns_runs(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, t) in tags.iter().enumerate() {
        match (t.is_novel(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, tags.len() - 1));
    }
    runs
}

fn random_tags(r: &mut ChaCha8Rng, n: usize) -> Vec<Tag> {
    (0..n)
        .map(|_| match r.random_range(0..5) {
            0 | 1 => Tag::Outside,
            2 => Tag::Novel,
            3 => Tag::Begin("a".into()),
            _ => Tag::Inside("a".into()),
        })
        .collect()
}

/// Random utterances that contain at least one gold NS span.
pub fn random_rose_pair(r: &mut ChaCha8Rng) -> (Vec<Vec<Tag>>, Vec<Vec<Tag>>) {
    let m = r.random_range(1..=6);
    let mut gold: Vec<Vec<Tag>> = (0..m)
        .map(|_| {
            let n = r.random_range(1..=12);
            random_tags(r, n)
        })
        .collect();
    gold[0][0] = Tag::Novel;
    let pred = gold
        .iter()
        .map(|g| {
            g.iter()
                .map(|t| match r.random_range(0..4) {
                    0 => Tag::Novel,
                    1 => Tag::Outside,
                    _ => t.clone(),
                })
                .collect()
        })
        .collect();
    (pred, gold)
}

pub fn rose_properties(pairs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for i in 0..pairs {
        let (pred, gold) = random_rose_pair(&mut r);
        let mut levels: Vec<f64> = ROSE_LEVELS.to_vec();
        levels.extend((0..8).map(|_| r.random_range(0.01..=1.0)));
        levels.sort_by(f64::total_cmp);
        let mut prev = f64::INFINITY;
        for &p in &levels {
            let s = rose(&pred, &gold, p).map_err(|e| e.to_string())?;
            if s.reported > prev + 1e-12 {
                return Err(format!(
                    "pair {i}: ROSE rose from {prev} to {} at p={p}",
                    s.reported
                ));
            }
            prev = s.reported;
            let mut correct = 0;
            for (pu, gu) in pred.iter().zip(&gold) {
                for (a, b) in ns_runs(gu) {
                    let hit = (a..=b).filter(|&t| pu[t].is_novel()).count();
                    if hit as f64 >= p * (b - a + 1) as f64 {
                        correct += 1;
                    }
                }
            }
            if s.correct_gold_spans != correct {
                return Err(format!(
                    "pair {i}, p={p}: {} correct spans, oracle {correct}",
                    s.correct_gold_spans
                ));
            }
        }
        let full = rose(&pred, &gold, 1.0).map_err(|e| e.to_string())?;
        let exact: usize = pred
            .iter()
            .zip(&gold)
            .map(|(p, g)| {
                let ps = ns_runs(p);
                ns_runs(g).iter().filter(|s| ps.contains(s)).count()
            })
            .sum();
        if full.correct_gold_spans < exact {
            return Err(format!(
                "pair {i}: {exact} exact NS matches but {} correct at p=1",
                full.correct_gold_spans
            ));
        }
        for &p in &ROSE_LEVELS {
            let s = rose(&gold, &gold, p).map_err(|e| e.to_string())?;
            if s.reported != 100.0 {
                return Err(format!(
                    "pair {i}: pred == gold gives {} at p={p}",
                    s.reported
                ));
            }
        }
    }
    Ok(format!("{pairs} random pairs"))
}

/// Corpus directory of a public dataset under `NSD_DATA_DIR`.
pub fn dataset_dir(name: &str) -> Result<PathBuf, String> {
    let root = std::env::var_os("NSD_DATA_DIR")
        .ok_or_else(|| format!("blocked: NSD_DATA_DIR is unset, {name} corpus unavailable"))?;
    let dir = PathBuf::from(root).join(name);
    if !dir.is_dir() {
        return Err(format!("blocked: {} not found", dir.display()));
    }
    Ok(dir)
}

struct CorpusStatsRow {
    name: &'static str,
    sizes: [usize; 3],
    vocab: usize,
    oov: f64,
}

pub fn corpus_statistics() -> Check {
    let rows = [
        CorpusStatsRow {
            name: "snips",
            sizes: [13084, 700, 700],
            vocab: 11241,
            oov: 5.95,
        },
        CorpusStatsRow {
            name: "atis",
            sizes: [4478, 500, 893],
            vocab: 722,
            oov: 0.77,
        },
    ];
    let mut details = Vec::new();
    for row in rows {
        let splits = load_corpus_dir(&dataset_dir(row.name)?).map_err(|e| e.to_string())?;
        let sizes = [splits.train.len(), splits.val.len(), splits.test.len()];
        if sizes != row.sizes {
            return Err(format!(
                "{}: sizes {sizes:?}, expected {:?}",
                row.name, row.sizes
            ));
        }
        let lower = compute_stats(&splits, CasePolicy::Lowercase);
        let verbatim = compute_stats(&splits, CasePolicy::Verbatim);
        let exact = [&lower, &verbatim].iter().any(|s| {
            s.vocabulary_size == row.vocab && (s.oov_word_percentage - row.oov).abs() < 0.005
        });
        let gap = (lower.oov_word_percentage - row.oov).abs();
        if !exact && gap > 0.3 {
            return Err(format!(
                "{}: vocabulary {} OOV {:.2}% (lowercase), expected {} / {:.2}%",
                row.name, lower.vocabulary_size, lower.oov_word_percentage, row.vocab, row.oov
            ));
        }
        details.push(format!(
            "{} vocab {} OOV {:.2}%{}",
            row.name,
            lower.vocabulary_size,
            lower.oov_word_percentage,
            if exact { " exact" } else { "" }
        ));
    }
    Ok(details.join("; "))
}

pub fn benchmark_reproduction() -> Check {
    let splits = load_corpus_dir(&dataset_dir("snips")?).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let schema = derive_schema(&splits.train);
    let (mut removed, mut share, mut oov) = (0.0, 0.0, 0.0);
    for seed in 0..10u64 {
        let b = build_benchmark(
            &splits,
            &schema,
            &NsdConfig {
                selection: UnknownSelection::Proportion(0.15),
                strategy: Strategy::Remove,
                seed,
            },
        )
        .map_err(|e| e.to_string())?;
        if b.unknown_types.len() != 6 {
            return Err(format!(
                "seed {seed}: {} unknown types",
                b.unknown_types.len()
            ));
        }
        let s = benchmark_stats(&b, CasePolicy::Lowercase);
        removed += 10.0 * s.removed_train_fraction;
        share += s.test_unknown_value_share() / 10.0;
        oov += s.oov_word_percentage / 10.0;
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "removed {removed:.2}% (28.70 ± 5), unknown share {share:.2}% (12.29 ± 3), OOV {oov:.2}% (8.51 ± 1.5), {elapsed:.1?}"
    );
    let ok = (removed - 28.70).abs() <= 5.0
        && (share - 12.29).abs() <= 3.0
        && (oov - 8.51).abs() <= 1.5
        && elapsed.as_secs_f64() < 30.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// NSD Token F1 per seed for each strategy from a completed report.
pub fn token_f1_by_seed(
    report: &nsd_core::experiment::RunReport,
    strategy: Strategy,
    detector: &str,
) -> BTreeMap<u64, f64> {
    use nsd_core::experiment::{CellOutcome, DetectorOutcome};
    report
        .cells
        .iter()
        .filter(|c| c.strategy == strategy)
        .filter_map(|c| match &c.outcome {
            CellOutcome::Completed(r) => r
                .detectors
                .iter()
                .find(|d| d.detector == detector)
                .and_then(|d| match &d.outcome {
                    DetectorOutcome::Completed { metrics, .. } => {
                        Some((c.seed, metrics.nsd_token.f1))
                    }
                    DetectorOutcome::Failed { .. } => None,
                }),
            CellOutcome::Failed { .. } => None,
        })
        .collect()
}

pub fn strategy_ordering() -> Check {
    let dir = dataset_dir("snips")?;
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(CorpusSource::Dir(dir));
    cfg.strategies = vec![Strategy::Replace, Strategy::Remove];
    cfg.seeds = ExperimentConfig::seed_range(0, 10);
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let name = cfg.detectors[0].to_string();
    let replace = token_f1_by_seed(&report, Strategy::Replace, &name);
    let remove = token_f1_by_seed(&report, Strategy::Remove, &name);
    let wins = remove
        .iter()
        .filter(|(s, f)| replace.get(s).is_some_and(|r| *f > r))
        .count();
    let mean = |m: &BTreeMap<u64, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
    let elapsed = start.elapsed();
    let detail = format!(
        "Remove > Replace in {wins}/10 seeds, Replace {:.2}, Remove {:.2}, {elapsed:.0?}",
        mean(&replace),
        mean(&remove)
    );
    let ok = wins >= 9
        && replace.len() == 10
        && remove.len() == 10
        && mean(&replace) < 10.0
        && mean(&remove) > 0.0
        && elapsed.as_secs_f64() < 20.0 * 60.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Small synthetic grid exercising every detector family.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(CorpusSource::Synthetic(
        nsd_core::synthetic::SyntheticConfig {
            train: 400,
            val: 80,
            test: 80,
            seed: 11,
        },
    ));
    cfg.strategies = vec![Strategy::Replace, Strategy::Remove];
    cfg.detectors = [
        "gda:multiple:minimum",
        "gda:binary:difference",
        "msp:binary+multiple",
    ]
    .iter()
    .map(|s| s.parse().unwrap())
    .collect();
    cfg.seeds = vec![3, 4];
    cfg.features = "hashed:d=256".parse().unwrap();
    cfg.train.max_epochs = 4;
    cfg
}

pub fn determinism() -> Check {
    let cfg = small_config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in 0..2 {
        let mut c = cfg.clone();
        c.output_dir = dir.path().to_path_buf();
        let report = run_experiment(&c).map_err(|e| e.to_string())?;
        nsd_core::experiment::write_report(&report, run > 0).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?);
    }
    if bytes[0] == bytes[1] {
        Ok(format!(
            "report.json identical across runs ({} bytes)",
            bytes[0].len()
        ))
    } else {
        Err("report.json differs between runs".into())
    }
}
