use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eaaw_bench::fixture;
use eaaw_core::embedding::{joint_loss, EmbedConfig};
use eaaw_core::extraction::ridge_fit;
use eaaw_core::verification::chi_squared_log_p;
use eaaw_core::watermark::generate_masks;
use eaaw_core::{BlackBox, Corpus, MaskScheme, Sample, Tensor, Watermark};
use std::hint::black_box;

fn predict(c: &mut Criterion) {
    let (model, corpus, _) = fixture();
    let Corpus::Labeled(d) = &corpus else {
        unreachable!()
    };
    let batch: Vec<Sample> = (0..256)
        .map(|i| Sample::Features(d.row(i).to_vec()))
        .collect();
    c.bench_function("predict_batch_256", |b| {
        b.iter(|| model.predict_batch(black_box(&batch)).unwrap())
    });
}

fn ridge(c: &mut Criterion) {
    let mut g = c.benchmark_group("ridge_fit");
    for k in [64usize, 256] {
        let masks = generate_masks(4 * k, k, MaskScheme::Random, 3).unwrap();
        let m = Tensor::matrix(4 * k, k, masks.matrix()).unwrap();
        let v: Vec<f64> = (0..4 * k).map(|i| (i as f64 * 0.37).sin()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| ridge_fit(black_box(&m), black_box(&v), 1.0).unwrap())
        });
    }
    g.finish();
}

fn extract(c: &mut Criterion) {
    let (model, _, trigger) = fixture();
    let mut g = c.benchmark_group("extract");
    for k in [64usize, 256] {
        let ex = EmbedConfig::default().explainer(256, k).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| ex.extract(&model, black_box(&trigger)).unwrap())
        });
    }
    g.finish();
}

fn embedding_step(c: &mut Criterion) {
    let (model, corpus, trigger) = fixture();
    let (batch, _) = corpus.split_at(64);
    let wm = Watermark::random(64, 5).unwrap();
    let cfg = EmbedConfig::default();
    let ex = cfg.explainer(256, 64).unwrap();
    let triggers = [trigger];
    c.bench_function("joint_loss_grad_k64_b64", |b| {
        b.iter(|| joint_loss(&model, &batch, &triggers, wm.bits(), &ex, &cfg).unwrap())
    });
}

fn chi_squared(c: &mut Criterion) {
    let a = Watermark::random(1024, 1).unwrap();
    let e = Watermark::random(1024, 2).unwrap();
    c.bench_function("chi_squared_k1024", |b| {
        b.iter(|| chi_squared_log_p(black_box(e.bits()), black_box(a.bits())).unwrap())
    });
}

criterion_group!(
    benches,
    predict,
    ridge,
    extract,
    embedding_step,
    chi_squared
);
criterion_main!(benches);
