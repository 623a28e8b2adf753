use comp_bench::{random_matrix, random_spd, random_tokens, toy_config};
use comp_core::importance::{score_dense, EpsilonRule};
use comp_core::linalg::{cholesky_factor, cholesky_solve, extreme_eigpair, EigOptions, Extreme};
use comp_core::masktune::{tune_mask, Solver, TuneProblem};
use comp_core::{DenseKind, DenseLayer, Model, Vector};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn cholesky(c: &mut Criterion) {
    let mut group = c.benchmark_group("cholesky");
    for n in [64, 176] {
        let m = random_spd(1, n);
        let rhs = vec![1.0; n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| {
                let l = cholesky_factor(black_box(m)).unwrap();
                cholesky_solve(&l, &rhs).unwrap()
            })
        });
    }
    group.finish();
}

fn eigpair(c: &mut Criterion) {
    let mut group = c.benchmark_group("eigpair");
    let m = random_spd(2, 64);
    for which in [Extreme::Max, Extreme::Min] {
        group.bench_function(format!("{which:?}"), |b| {
            b.iter(|| extreme_eigpair(black_box(&m), which, EigOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn neuron_scores(c: &mut Criterion) {
    let w = random_matrix(3, 64, 64);
    let dense = DenseLayer::new(DenseKind::QProj, w, Vector::zeros(64));
    let x = vec![0.5; 64];
    c.bench_function("score_dense_64", |b| {
        b.iter(|| score_dense(black_box(&dense), &x, EpsilonRule::default()).unwrap())
    });
}

fn mask_tuning(c: &mut Criterion) {
    let mut group = c.benchmark_group("tune_mask");
    let w = random_matrix(4, 64, 176);
    let x = random_matrix(5, 1280, 176);
    let mask: Vec<bool> = (0..176).map(|j| j % 4 != 0).collect();
    for solver in [Solver::Direct, Solver::Iterative] {
        let problem = TuneProblem {
            weight: &w,
            inputs: &x,
            targets: None,
            mask: &mask,
            epsilon: 1e-6,
            solver,
        };
        group.bench_function(format!("{solver:?}"), |b| b.iter(|| tune_mask(black_box(&problem)).unwrap()));
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::random(toy_config(), 0).unwrap();
    let tokens = random_tokens(6, 128);
    c.bench_function("forward_128", |b| b.iter(|| model.forward(black_box(&tokens)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = cholesky, eigpair, neuron_scores, mask_tuning, forward
}
criterion_main!(benches);
