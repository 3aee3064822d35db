//! Sequential versus rayon-parallel execution of the data-parallel loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nsd_core::crf::{self, Objective, TrainConfig};
use nsd_core::detect::{fit_gda_for_objective, score_utterances, DetectorModels, DetectorSpec};
use nsd_core::experiment::{hashed_features, SplitFeatures};
use nsd_core::features::hash_corpus;
use nsd_core::synthetic::{generate, SyntheticConfig};
use nsd_core::{
    build_benchmark, derive_schema, HashedFeatureSpec, NsdBenchmark, NsdConfig, Parallelism,
    Strategy, UnknownSelection,
};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn setup() -> (NsdBenchmark, SplitFeatures, HashedFeatureSpec) {
    let splits = generate(&SyntheticConfig {
        train: 600,
        val: 150,
        test: 150,
        seed: 1,
    });
    let bench = build_benchmark(
        &splits,
        &derive_schema(&splits.train),
        &NsdConfig {
            selection: UnknownSelection::Proportion(0.15),
            strategy: Strategy::Remove,
            seed: 0,
        },
    )
    .unwrap();
    let spec = HashedFeatureSpec::new(1024);
    let feats = hashed_features(
        &spec,
        &bench.train.utterances,
        &bench.val.utterances,
        &bench.test.utterances,
        Parallelism::Sequential,
    );
    (bench, feats, spec)
}

fn benches(c: &mut Criterion) {
    let (bench, feats, spec) = setup();

    let mut g = c.benchmark_group("hash_features");
    for (name, par) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| hash_corpus(&bench.train.utterances, &spec, par))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, par) in MODES {
        let cfg = TrainConfig {
            max_epochs: 1,
            parallelism: par,
            ..TrainConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| {
                crf::train(
                    Objective::Multiple,
                    &bench.in_domain_schema,
                    &bench.train.utterances,
                    &feats.train,
                    &bench.val.utterances,
                    &feats.val,
                    cfg,
                )
                .unwrap()
            })
        });
    }
    g.finish();

    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let (tagger, _) = crf::train(
        Objective::Multiple,
        &bench.in_domain_schema,
        &bench.train.utterances,
        &feats.train,
        &bench.val.utterances,
        &feats.val,
        &cfg,
    )
    .unwrap();
    let gda = fit_gda_for_objective(
        Objective::Multiple,
        &bench.in_domain_schema,
        &bench.train.utterances,
        &feats.train,
        None,
        Default::default(),
    )
    .unwrap();
    let models = DetectorModels {
        multiple: &tagger,
        binary: None,
        gda: Some(&gda),
    };
    for detector in ["msp:multiple", "gda:multiple:minimum"] {
        let spec: DetectorSpec = detector.parse().unwrap();
        let mut g = c.benchmark_group(format!("score/{detector}"));
        for (name, par) in MODES {
            g.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
                b.iter(|| score_utterances(models, &feats.test, &spec, par).unwrap())
            });
        }
        g.finish();
    }
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
