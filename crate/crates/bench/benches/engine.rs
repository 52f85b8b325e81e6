use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dleng::gmm::sinkhorn_responsibilities;
use dleng::ood::{detect_components, DetectConfig};
use dleng::pipeline::{build_index, fit_bundle_scorer, fit_seed_model, LoopConfig};
use dleng::retrieval::to_f64;
use dleng::{IndexConfig, Modality};
use dleng_bench::{embeddings, random_log_lik, small_scenario};

fn sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    for &n in &[200usize, 2000] {
        let ll = random_log_lik(n, 4, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &ll, |b, ll| {
            b.iter(|| sinkhorn_responsibilities(black_box(ll), n, 4, 50).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let records = embeddings(10_000);
    let config = IndexConfig::default();
    let index = build_index(&records, Modality::Image, &config).unwrap();
    let query = to_f64(&records[17].vector);
    let mut group = c.benchmark_group("retrieval");
    group.bench_function("query_topn_default_nprobe", |b| {
        b.iter(|| index.query_topn(black_box(&query), 10, config.default_nprobe()).unwrap())
    });
    group.bench_function("exact_topn", |b| b.iter(|| index.exact_topn(black_box(&query), 10).unwrap()));
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let bundle = small_scenario();
    let mut config = LoopConfig::default();
    config.ood.epochs = 20;
    config.max_inlier_cells = 1200;
    let model = fit_seed_model(&bundle, &config).unwrap();
    let scorer = fit_bundle_scorer(&bundle, &config).unwrap();
    let frame = &bundle.val[0];
    let mut group = c.benchmark_group("ood");
    group.bench_function("score_grid_32x32", |b| {
        b.iter(|| scorer.score_grid(black_box(&frame.features), &model, &[]).unwrap())
    });
    let scores = scorer.score_grid(&frame.features, &model, &[]).unwrap();
    group.bench_function("detect_components_32x32", |b| {
        b.iter(|| detect_components(black_box(&scores), Some(&frame.features), &DetectConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sinkhorn, retrieval, scoring);
criterion_main!(benches);
