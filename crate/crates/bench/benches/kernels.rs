use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use surgphase_bench::{gaussian, records};
use surgphase_core::autograd::Graph;
use surgphase_core::data::PhaseVocabulary;
use surgphase_core::encoder::{compute_logits, LogitHead};
use surgphase_core::eval::evaluate;
use surgphase_core::tcn::{tcn_forward, TcnConfig, TcnModel};

fn logits(c: &mut Criterion) {
    let text = gaussian(&[7, 1024], 1);
    let head = LogitHead::default();
    let mut group = c.benchmark_group("compute_logits");
    for batch in [1usize, 64, 512] {
        let image = gaussian(&[batch, 1024], 2);
        group.bench_with_input(BenchmarkId::from_parameter(batch), &image, |b, image| {
            b.iter(|| compute_logits(black_box(image), black_box(&text), &head).unwrap())
        });
    }
    group.finish();
}

fn temporal(c: &mut Criterion) {
    let mut group = c.benchmark_group("tcn_forward");
    group.sample_size(10);
    for (hidden, frames) in [(64usize, 1000usize), (256, 1000), (64, 5000)] {
        let cfg = TcnConfig {
            hidden_dim: hidden,
            ..TcnConfig::default()
        };
        let model = TcnModel::init(&cfg, 64, 7).unwrap();
        let features = gaussian(&[frames, 64], 3);
        group.bench_with_input(BenchmarkId::new(format!("h{hidden}"), frames), &features, |b, f| {
            b.iter(|| tcn_forward(&model, black_box(f)).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let vocab = PhaseVocabulary::numbered(7);
    let recs = records(40, 2000, 7, 4);
    c.bench_function("evaluate/40x2000", |b| b.iter(|| evaluate(black_box(&recs), &vocab).unwrap()));
}

fn convolution(c: &mut Criterion) {
    let x = gaussian(&[32, 16, 32, 32], 5);
    let w = gaussian(&[32, 16, 3, 3], 6);
    c.bench_function("conv2d/32x16x32x32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, 2, 1);
            black_box(g.value(y).data()[0])
        })
    });
}

criterion_group!(benches, logits, temporal, metrics, convolution);
criterion_main!(benches);
