use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cac_core::algorithm::{AlgorithmConfig, Learner, Stepsizes, Variant};
use cac_core::envs::CoordinationGame;
use cac_core::montecarlo::{run_seeds_parallel, run_seeds_sequential};
use cac_core::network::GraphSchedule;
use cac_core::policy::Sharing;

fn seeds(c: &mut Criterion) {
    let game = CoordinationGame::new(4, true, 0.9).unwrap();
    let features = game.features();
    let policy_features = game.policy_features(Sharing::Split);
    let schedule = GraphSchedule::federated(4, 5).unwrap();
    let stepsizes = Stepsizes::Constant {
        alpha: 0.05,
        beta: 0.1,
        zeta: 0.1,
    };
    let config = AlgorithmConfig::new(Variant::Cac, stepsizes, 2_000);
    let learner = Learner::new(&game, &features, &policy_features, &schedule, config).unwrap();
    let job = |seed: u64| {
        let out = learner.run(seed, None).unwrap();
        out.records.last().map_or(0.0, |r| r.running_avg_reward)
    };

    let mut group = c.benchmark_group("monte_carlo_seeds");
    group.sample_size(10);
    for n_seeds in [4usize, 16] {
        let list: Vec<u64> = (0..n_seeds as u64).collect();
        group.bench_with_input(BenchmarkId::new("sequential", n_seeds), &list, |b, s| {
            b.iter(|| run_seeds_sequential(s, job))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n_seeds), &list, |b, s| {
            b.iter(|| run_seeds_parallel(s, job))
        });
    }
    group.finish();
}

criterion_group!(benches, seeds);
criterion_main!(benches);
