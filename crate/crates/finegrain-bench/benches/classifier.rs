use criterion::{Criterion, criterion_group, criterion_main};
use std::hint::black_box;

use finegrain_core::matrix::DenseMatrix;
use finegrain_core::nn::{self, ClassifierState, MlpParams, WhichParams};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn bench_classifier(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let params = MlpParams::init(&[16, 64, 64, 64, 12], &mut rng).unwrap();
    let state = ClassifierState::new(params.clone());
    let batch = DenseMatrix::from_vec(
        256,
        16,
        (0..256 * 16).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();

    c.bench_function("forward_256x16", |b| {
        b.iter(|| nn::forward_logits(black_box(&state), WhichParams::Current, black_box(&batch)))
    });

    let trace = nn::forward_trace(&params, &batch).unwrap();
    let probs = nn::softmax_rows(&trace.logits, 1.0).unwrap();
    let grad = nn::softmax_backward(&probs, &probs).unwrap();
    c.bench_function("backward_256x16", |b| {
        b.iter(|| nn::backward_from_trace(black_box(&params), &batch, &trace, &grad).unwrap())
    });

    c.bench_function("softmax_256x12", |b| {
        b.iter(|| nn::softmax_rows(black_box(&trace.logits), 0.9).unwrap())
    });
}

criterion_group!(benches, bench_classifier);
criterion_main!(benches);
