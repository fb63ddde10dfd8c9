use criterion::{black_box, criterion_group, criterion_main, Criterion};
use duoprompt_core::metrics::max_f_measure;
use duoprompt_core::model::window::{window_partition, window_reverse};
use duoprompt_core::{rng, Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| rng::normal(&mut r))
}

fn matmul(c: &mut Criterion) {
    let a = randn(&[16, 22, 32], 1);
    let b = randn(&[16, 32, 22], 2);
    c.bench_function("batched_matmul_16x22x32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
            black_box(y.value().sum())
        })
    });
}

fn softmax_backward(c: &mut Criterion) {
    let x = randn(&[64, 22, 22], 3);
    c.bench_function("softmax_forward_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let v = tape.param(x.clone());
            let loss = v.softmax().unwrap().mul(v).unwrap().sum();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn windows(c: &mut Criterion) {
    let x = randn(&[256, 16], 4);
    c.bench_function("window_roundtrip_16x16", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let w = window_partition(tape.constant(x.clone()), 4).unwrap();
            black_box(window_reverse(w, 16).unwrap().value().sum())
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut r = rng::seeded(5);
    let pred = Tensor::from_fn(&[64, 64], |_| rng::uniform(&mut r, 0.0, 1.0));
    let gt = Tensor::from_fn(&[64, 64], |i| ((i / 64) % 3 == 0) as u8 as f64);
    c.bench_function("max_f_measure_64x64", |bench| bench.iter(|| black_box(max_f_measure(&pred, &gt).unwrap())));
}

criterion_group!(benches, matmul, softmax_backward, windows, metrics);
criterion_main!(benches);
