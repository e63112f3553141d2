use std::hint::black_box;

use convformer::data::synth_motion;
use convformer::metrics::{p_mpjpe, Pose3D};
use convformer::model::{ConvFormerModel, ModelConfig, Variant};
use convformer::trainer::{train, TrainConfig};
use convformer::{rng, Graph, Packing, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d_same");
    let mut r = rng::seeded(0);
    // spatial (17 joints, 8·d channels) and temporal (9 frames, 17·d channels) shapes at d=32
    for (name, batch, cin, len) in [("spatial", 576, 32, 17), ("temporal", 64, 544, 9)] {
        let x = Tensor::randn([batch, cin, len], 1.0, &mut r);
        let w = Tensor::randn([3 * cin, cin, 7], 0.1, &mut r);
        let b = Tensor::zeros([3 * cin]);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
                let y = g.conv1d_same(xv, wv, bv).unwrap();
                let loss = g.sum(y);
                g.backward(loss).unwrap();
                black_box(g.grad(wv).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("packed_attention");
    let mut r = rng::seeded(1);
    for (name, batch, len, width) in [("spatial", 576, 17, 32), ("temporal", 64, 9, 544)] {
        let qkv = Tensor::randn([batch, len, 3 * width], 1.0, &mut r);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.param(qkv.clone());
                let y = g.packed_attention(x, 8, Packing::Columns).unwrap();
                let loss = g.sum(y);
                g.backward(loss).unwrap();
                black_box(g.grad(x).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let clip = synth_motion(0, 64).unwrap();
    for variant in Variant::ALL {
        let cfg = ModelConfig { dim: 16, variant, ..ModelConfig::default() };
        let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
        group.bench_function(BenchmarkId::new("train_batch64_d16", variant.as_str()), |bench| {
            bench.iter_batched(
                || ConvFormerModel::new(cfg.clone(), 0).unwrap(),
                |mut m| black_box(train(&mut m, std::slice::from_ref(&clip), &[], &tc, None).unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    let m = ConvFormerModel::new(ModelConfig::default(), 0).unwrap();
    let windows = Tensor::randn([64, 9, 17, 2], 0.5, &mut rng::seeded(2));
    group.bench_function("predict_batch64_d32", |bench| bench.iter(|| black_box(m.predict(&windows).unwrap())));
    group.finish();
}

fn procrustes(c: &mut Criterion) {
    let mut r = rng::seeded(3);
    let pose = |r: &mut convformer::Rng| {
        let t = Tensor::randn([17, 3], 300.0, r);
        Pose3D::new(t.data().chunks(3).map(|j| [j[0], j[1], j[2]]).collect()).unwrap()
    };
    let (p, q) = (pose(&mut r), pose(&mut r));
    c.bench_function("p_mpjpe_17_joints", |bench| bench.iter(|| black_box(p_mpjpe(&p, &q).unwrap())));
}

criterion_group!(benches, conv, attention, model, procrustes);
criterion_main!(benches);
