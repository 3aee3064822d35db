#[path = "../../validation/src/lib.rs"]
mod common;

use nsd_core::detect::{distance_score, gda_fit, DistanceMetric, DistanceStrategy, GdaSample};
use nsd_core::TokenFeatureMatrix;

#[test]
fn fit_recovers_two_gaussians() {
    let detail = common::gda_oracle(10_000, 7).unwrap();
    assert!(detail.contains("identity-covariance probes equal"));
}

#[test]
fn sparse_and_dense_rows_fit_the_same_model() {
    let (feats, classes) = common::two_gaussians(500, 8);
    let sparse: Vec<TokenFeatureMatrix> = feats
        .iter()
        .map(|x| {
            let rows = x
                .rows()
                .map(|r| {
                    let v = r.to_dense(2);
                    vec![(0u32, v[0]), (1u32, v[1])]
                })
                .collect();
            TokenFeatureMatrix::sparse(x.utterance, 2, rows).unwrap()
        })
        .collect();
    let fit = |f: &[TokenFeatureMatrix]| {
        gda_fit(
            GdaSample {
                features: f,
                classes: &classes,
            },
            vec!["a".into(), "b".into()],
            Some(1e-3),
            DistanceMetric::Mahalanobis,
        )
        .unwrap()
    };
    let (d, s) = (fit(&feats), fit(&sparse));
    for (a, b) in d.covariance.iter().zip(s.covariance.iter()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    for (a, b) in d.means.iter().zip(&s.means) {
        assert!((a - b).amax() < 1e-12);
    }
}

#[test]
fn nearest_mean_accuracy_matches_bayes_rate() {
    let (feats, classes) = common::two_gaussians(2_000, 9);
    let model = gda_fit(
        GdaSample {
            features: &feats,
            classes: &classes,
        },
        vec!["a".into(), "b".into()],
        None,
        DistanceMetric::Mahalanobis,
    )
    .unwrap();
    let mut correct = 0;
    let mut total = 0;
    for (x, c) in feats.iter().zip(&classes) {
        for (row, gold) in x.rows().zip(c) {
            let d = model.distances(row);
            let pred = if d[0] <= d[1] { 0 } else { 1 };
            correct += usize::from(Some(pred) == *gold);
            total += 1;
            assert!(distance_score(&d, DistanceStrategy::Minimum) <= d[0].max(d[1]));
        }
    }
    let bayes = 0.855_904_039_753_588_5;
    let acc = correct as f64 / total as f64;
    assert!(
        (acc - bayes).abs() < 0.015,
        "{correct}/{total} vs Bayes rate {bayes}"
    );
}
