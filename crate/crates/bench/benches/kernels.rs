use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sgq_core::nn::{conv2d, ActivationKind, Architecture, InputShape, Model};
use sgq_core::quant::{
    pack_weights, quantize_weights_qat, unpack_weights, weight_scale, Bits, QuantSpec,
};
use sgq_core::saliency::compute_saliency;
use sgq_core::tape::Tape;
use sgq_core::Tensor;

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5)
            .collect(),
    )
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (cin, cout, side) in [(3, 16, 64), (16, 32, 32), (32, 64, 16)] {
        let x = ramp(&[8, cin, side, side]);
        let w = ramp(&[cout, cin, 3, 3]);
        let id = format!("{cin}->{cout}@{side}");
        g.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| conv2d(black_box(&x), black_box(&w), 1, 1).unwrap())
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), true).unwrap();
                let wv = t.leaf(w.clone(), true).unwrap();
                let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
                let l = t.sum(y).unwrap();
                t.backward(l).unwrap()
            })
        });
    }
    g.finish();
}

fn model_passes(c: &mut Criterion) {
    let model = Model::new(
        Architecture::default_cnn(8),
        InputShape::square(3, 64),
        8,
        ActivationKind::Pact,
        6.0,
        0,
    )
    .unwrap()
    .with_quant(Some(QuantSpec::full(Bits::new(8).unwrap())));
    let x = ramp(&[8, 3, 64, 64]).map(|v| v + 0.5);
    let labels = [0, 1, 2, 3, 4, 5, 6, 7];
    let mut g = c.benchmark_group("default_cnn_batch8");
    g.sample_size(10);
    g.bench_function("logits", |b| {
        b.iter(|| model.logits(black_box(&x)).unwrap())
    });
    g.bench_function("saliency", |b| {
        b.iter(|| compute_saliency(&model, black_box(&x), &labels).unwrap())
    });
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let bound = model.bind(&mut t, true).unwrap();
            let xv = t.constant(x.clone()).unwrap();
            let y = model.forward(&mut t, &bound, xv).unwrap();
            let l = t.cross_entropy(y, &labels).unwrap();
            t.backward_wrt(l, &bound.params()).unwrap()
        })
    });
    g.finish();
}

fn packing(c: &mut Criterion) {
    let w = ramp(&[64, 32, 3, 3]);
    let mut g = c.benchmark_group("pack");
    for k in [2, 4, 8] {
        let bits = Bits::new(k).unwrap();
        let q = quantize_weights_qat(&w, bits);
        let scale = weight_scale(&w, bits);
        let packed = pack_weights(&q, bits, scale).unwrap();
        g.bench_function(BenchmarkId::new("pack", k), |b| {
            b.iter(|| pack_weights(black_box(&q), bits, scale).unwrap())
        });
        g.bench_function(BenchmarkId::new("unpack", k), |b| {
            b.iter(|| unpack_weights(black_box(&packed), q.shape(), bits, scale).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, model_passes, packing);
criterion_main!(benches);
