use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use csa_core::attention::{CsaBlock, SeBlock};
use csa_core::autodiff::Graph;
use csa_core::data::SyntheticConfig;
use csa_core::model::{build_model, ModelSpec, Variant};
use csa_core::spatial::{build_weights, local_moran_direct, local_moran_matrix, standardize, DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA};
use csa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn channel_means(f: &Tensor) -> Tensor {
    let plane = f.len() / f.dim(0);
    Tensor::vector(f.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect())
}

fn spatial(c: &mut Criterion) {
    let mut group = c.benchmark_group("spatial");
    for &channels in &[16usize, 64, 256] {
        let f = random(&[channels, 8, 8], 1);
        group.bench_with_input(BenchmarkId::new("build_weights", channels), &f, |b, f| {
            b.iter(|| build_weights(black_box(f), DEFAULT_EPS_DIST).unwrap())
        });
        let sw = build_weights(&f, DEFAULT_EPS_DIST).unwrap();
        let x = channel_means(&f);
        let (z, _) = standardize(&x, DEFAULT_EPS_SIGMA);
        group.bench_function(BenchmarkId::new("moran_matrix", channels), |b| {
            b.iter(|| local_moran_matrix(black_box(&z), black_box(&sw.weights)).unwrap())
        });
        group.bench_function(BenchmarkId::new("moran_direct", channels), |b| {
            b.iter(|| local_moran_direct(black_box(&x), black_box(&sw.contiguity)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    for &(channels, side) in &[(16usize, 16usize), (64, 4), (256, 7)] {
        let f = random(&[channels, side, side], 2);
        let id = format!("{channels}x{side}x{side}");
        let csa = CsaBlock::new(channels, 16, 3).unwrap();
        let se = SeBlock::new(channels, 16, 3).unwrap();
        group.bench_with_input(BenchmarkId::new("csa", &id), &f, |b, f| b.iter(|| csa.csa_forward(black_box(f)).unwrap()));
        group.bench_with_input(BenchmarkId::new("se", &id), &f, |b, f| b.iter(|| se.se_forward(black_box(f)).unwrap()));
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(cin, cout, side, stride) in &[(16usize, 16usize, 16usize, 1usize), (16, 32, 16, 2), (64, 64, 4, 1)] {
        let x = random(&[cin, side, side], 4);
        let k = random(&[cout, cin, 3, 3], 5);
        let id = format!("{cin}to{cout}_{side}px_s{stride}");
        group.bench_function(BenchmarkId::new("forward_backward", id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.param(x.clone());
                let kv = g.param(k.clone());
                let y = g.conv2d(xv, kv, None, stride, 1).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (train, _) = SyntheticConfig::default().generate().unwrap();
    let image = train.images[0].clone();
    let label = train.labels[0];
    let mut group = c.benchmark_group("sample_step");
    group.sample_size(20);
    for variant in Variant::ALL {
        let model = build_model(&ModelSpec {
            variant,
            num_classes: train.num_classes,
            ..ModelSpec::default()
        })
        .unwrap();
        group.bench_function(variant.as_str(), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let params = model.bind(&mut g, true);
                let input = g.constant(image.clone());
                let pass = model.forward(&mut g, &params, input).unwrap();
                let loss = g.softmax_cross_entropy(pass.logits, label).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, spatial, attention, conv, train_step);
criterion_main!(benches);
