use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::Rng;
use triadic_core::alignment::{permutation_test_matrices, procrustes_matrices};
use triadic_core::concepts::{generate_triplets, triplet_pool, ConceptSet, TaskDimension};
use triadic_core::embedding::{fit_observations, nll_gradient, sample_crowd_kernel, FitConfig};
use triadic_core::rng;
use triadic_core::steering::{Agent, PromptSpec, ToyAgent, ToyParams};

fn points(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::derived(seed, &["bench"]);
    DMatrix::from_fn(n, 2, |_, _| r.random_range(-1.0..1.0))
}

fn embedding(c: &mut Criterion) {
    let truth = points(46, 0);
    let mut g = c.benchmark_group("embedding");
    for n in [500, 2500, 10_000] {
        let obs = sample_crowd_kernel(&truth, n, 0.05, 1);
        g.bench_with_input(BenchmarkId::new("nll_gradient", n), &obs, |b, obs| {
            b.iter(|| nll_gradient(black_box(&truth), obs, 0.05).unwrap())
        });
    }
    let obs = sample_crowd_kernel(&truth, 2500, 0.05, 1);
    let cfg = FitConfig::default();
    g.sample_size(10);
    g.bench_function("fit_default_2500", |b| b.iter(|| fit_observations(46, black_box(&obs), &cfg).unwrap()));
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let x = points(46, 2);
    let y = points(46, 3);
    let mut g = c.benchmark_group("alignment");
    g.bench_function("procrustes_46", |b| b.iter(|| procrustes_matrices(black_box(&x), &y).unwrap()));
    g.sample_size(20);
    g.bench_function("permutation_test_999", |b| {
        b.iter(|| permutation_test_matrices(black_box(&x), &y, 999, 0).unwrap())
    });
    g.finish();
}

fn concepts(c: &mut Criterion) {
    let set = ConceptSet::standin();
    let mut g = c.benchmark_group("concepts");
    g.bench_function("triplet_pool_standin", |b| b.iter(|| triplet_pool(black_box(&set), 1.5)));
    g.bench_function("generate_1000", |b| b.iter(|| generate_triplets(black_box(&set), 1.5, 0, 1000).unwrap()));
    g.finish();
}

fn toy_agent(c: &mut Criterion) {
    let set = ConceptSet::standin();
    let agent = ToyAgent::new(ToyParams::default(), &set).unwrap();
    let ts = generate_triplets(&set, 1.5, 0, 100).unwrap();
    let spec = PromptSpec::zero_shot(&ts.triplets()[0], TaskDimension::Neutral);
    c.bench_function("toy_forward_zero_shot", |b| b.iter(|| agent.forward(black_box(&spec), None).unwrap()));
}

criterion_group!(benches, embedding, alignment, concepts, toy_agent);
criterion_main!(benches);
