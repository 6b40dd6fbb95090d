use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use theorylab_core::graph::{build_grid, GridReward};
use theorylab_core::par;
use theorylab_core::trainer::{derive_seed, train, Checkpoints, NoiseConfig, Schedule, TrainConfig, TrainContext};
use theorylab_core::Objective;

/// Independent training runs, one per seed: the unit of work experiment
/// cells are made of.
fn seed_cells(c: &mut Criterion) {
    let env = build_grid(2, 3, GridReward::Corner).unwrap();
    let ctx = TrainContext::new(&env, Objective::Tb).unwrap();
    let mut group = c.benchmark_group("seed_cells");
    group.sample_size(10);
    for n in [4usize, 16] {
        let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(0, i)).collect();
        let cell = |&seed: &u64| {
            let mut cfg = TrainConfig::new(Objective::Tb, Schedule::InvSqrt, 0.1, 2_000);
            cfg.seed = seed;
            train(&env, &ctx, &cfg, NoiseConfig::none(), Checkpoints::Geometric).unwrap().last().tv
        };
        group.bench_with_input(BenchmarkId::new("parallel", n), &seeds, |b, s| b.iter(|| black_box(par::map(s, cell))));
        group.bench_with_input(BenchmarkId::new("sequential", n), &seeds, |b, s| {
            b.iter(|| black_box(par::map_seq(s, cell)))
        });
    }
    group.finish();
}

criterion_group!(benches, seed_cells);
criterion_main!(benches);
