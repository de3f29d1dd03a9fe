use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use condcentile::exec::Parallelism;
use condcentile::experiment::{run_full_experiment, ExperimentConfig};
use condcentile::model::LognormalAR1Model;
use condcentile::numerics::{Probability, RngStream};
use condcentile::screening::{monte_carlo_screen_with, ShiftMode};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("rayon", Parallelism::Auto),
];

fn replications(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n_reps: 8,
        n_subjects: 500,
        ..Default::default()
    };
    let mut group = c.benchmark_group("replications");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| run_full_experiment(black_box(&cfg), par).unwrap())
        });
    }
    group.finish();
}

fn screening(c: &mut Criterion) {
    let model = LognormalAR1Model::default();
    let x = Probability::new(0.9).unwrap();
    let stream = RngStream::new(1);
    let mut group = c.benchmark_group("monte_carlo_screen");
    for (name, par) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &par, |b, &par| {
            b.iter(|| {
                monte_carlo_screen_with(
                    &model,
                    0.2,
                    ShiftMode::OnsetAtScreen,
                    &[22.0, 26.0, 30.0],
                    x,
                    50_000,
                    &stream,
                    par,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, replications, screening);
criterion_main!(benches);
