use criterion::{Criterion, criterion_group, criterion_main};
use std::hint::black_box;

use finegrain_core::relations::{CostMatrix, solve_relations_bruteforce, solve_relations_exact};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn bench_solver(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let small = CostMatrix::random(3, 8, &mut rng);
    let medium = CostMatrix::random(20, 100, &mut rng);
    let large = CostMatrix::random(34, 608, &mut rng);

    c.bench_function("exact_8x3", |b| {
        b.iter(|| solve_relations_exact(black_box(&small), 0.1).unwrap())
    });
    c.bench_function("bruteforce_8x3", |b| {
        b.iter(|| solve_relations_bruteforce(black_box(&small), 0.1, 1e7).unwrap())
    });
    c.bench_function("exact_100x20", |b| {
        b.iter(|| solve_relations_exact(black_box(&medium), 0.1).unwrap())
    });
    c.bench_function("exact_608x34", |b| {
        b.iter(|| solve_relations_exact(black_box(&large), 0.1).unwrap())
    });
}

criterion_group!(benches, bench_solver);
criterion_main!(benches);
