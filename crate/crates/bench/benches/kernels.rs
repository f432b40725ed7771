use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qbsde::conjugate::conjugate_z;
use qbsde::generators::inf_convolution;
use qbsde::paths::{doleans_exponential, ControlArray};
use qbsde::{conjugate_yz, example_generator, solve_backward, SolverConfig, TerminalSpec};
use qbsde_bench::ensemble;

fn simulate(c: &mut Criterion) {
    c.bench_function("simulate 20k x 50", |b| b.iter(|| ensemble(black_box(20_000), 50, 1)));
}

fn solve(c: &mut Criterion) {
    let gen = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
    let term: TerminalSpec = "sin".parse().unwrap();
    let ens = ensemble(20_000, 50, 1);
    let cfg = SolverConfig::default();
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    g.bench_function("pure_quadratic 20k x 50", |b| b.iter(|| solve_backward(&gen, &term, &ens, &cfg).unwrap()));
    let mono = example_generator("3.1.i", 1, 1.0).unwrap();
    let shifted: TerminalSpec = "sin(1,-1)".parse().unwrap();
    g.bench_function("3.1.i 20k x 50", |b| b.iter(|| solve_backward(&mono, &shifted, &ens, &cfg).unwrap()));
    g.finish();
}

fn conjugates(c: &mut Criterion) {
    let quad = example_generator("3.1.i", 1, 1.0).unwrap();
    let abs = example_generator("abs_y(1)", 1, 1.0).unwrap();
    c.bench_function("conjugate_z", |b| b.iter(|| conjugate_z(&quad, 0.0, black_box(0.3), &[1.5]).unwrap()));
    c.bench_function("conjugate_yz", |b| b.iter(|| conjugate_yz(&abs, 0.0, black_box(0.5), &[1.5]).unwrap()));
}

fn inf_conv(c: &mut Criterion) {
    let gen = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
    let g4 = inf_convolution(&gen, 4).unwrap();
    c.bench_function("inf_convolution eval n=4", |b| b.iter(|| g4.eval(0.0, 0.1, &[black_box(3.0)])));
}

fn weights(c: &mut Criterion) {
    let ens = ensemble(20_000, 50, 1);
    let q = ControlArray::constant(ens.n_paths, ens.grid.steps, &[1.0]);
    c.bench_function("doleans_exponential 20k x 50", |b| b.iter(|| doleans_exponential(&q, &ens).unwrap()));
}

criterion_group!(benches, simulate, solve, conjugates, inf_conv, weights);
criterion_main!(benches);
