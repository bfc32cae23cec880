use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vmflow::rng::seeded;
use vmflow::{build_mask, generate, granger_test, split_with_decay, Condition, Graph, SamplerConfig, Tensor, Variant};
use vmflow_bench::{sequences, trainer};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = seeded(0);
    for n in [32, 64, 128] {
        let a = Tensor::randn(&[n * 8, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(&a), g.constant(&b));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (seq, batch, width, heads) = (24, 16, 64, 4);
    let mut rng = seeded(1);
    let q = Tensor::randn(&[seq * batch, width], 1.0, &mut rng);
    let blocked: Arc<[bool]> = (0..seq * seq).map(|i| i % seq > i / seq).collect();
    c.bench_function("attention/forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.param(&q);
            let a = g.attention(x, x, x, blocked.clone(), seq, heads).unwrap();
            let s = g.square(a);
            let loss = g.sum(s);
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn masks(c: &mut Criterion) {
    let mut rng = seeded(2);
    c.bench_function("mask/build_16", |bench| {
        bench.iter(|| {
            let split = split_with_decay(16, 0.9, &mut rng).unwrap();
            black_box(build_mask(16, 1, 1, &split).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let (data, _) = sequences(0);
    let (x, conds) = data.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for variant in [Variant::Fm, Variant::Mf, Variant::Vmfd] {
        let mut tr = trainer(variant, &data, 32, 32);
        group.bench_function(variant.to_string(), |bench| bench.iter(|| black_box(tr.step_on(x.clone(), conds.clone()).unwrap())));
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let (data, _) = sequences(0);
    let tr = trainer(Variant::Vmf, &data, 32, 32);
    let shape = data.shape();
    let conds: Vec<Condition> = data.examples()[..64].iter().map(|e| Condition::Given(e.c.clone())).collect();
    let mut group = c.benchmark_group("sample_64");
    for (nfe, w) in [(1, 1.0), (1, 1.5), (4, 1.0)] {
        let cfg = SamplerConfig {
            nfe,
            guidance_w: w,
            conditional: true,
            seed: 0,
        };
        group.bench_function(format!("nfe{nfe}_w{w}"), |bench| {
            bench.iter(|| black_box(generate(&tr.net, &conds, shape.sample_len, shape.token_dim, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn granger(c: &mut Criterion) {
    let mut rng = seeded(3);
    let x = Tensor::randn(&[1, 500], 1.0, &mut rng);
    let y = Tensor::randn(&[1, 500], 1.0, &mut rng);
    let x: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    c.bench_function("granger/n500_lag4", |bench| bench.iter(|| black_box(granger_test(&x, &y, 4).unwrap())));
}

criterion_group!(benches, matmul, attention, masks, train_step, sampling, granger);
criterion_main!(benches);
