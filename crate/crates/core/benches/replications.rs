use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use microphys::agents::{decide_position_gated, AgentObservation, PolicyParams, PolicySpec};
use microphys::architecture::{SeededLevels, VisibilityKind, VisibilityRegime};
use microphys::engine::{run_experiment_with, Execution, ExperimentConfig};
use microphys::feed::{render_slate, shuffle_slate, FeedLedger, Slate};
use microphys::rng::split_stream;
use microphys::validation::{compare_distributions, PermutationTest, ReferenceTrace, Statistic};
use microphys::metrics::AttentionDistribution;

fn config(reps: u32) -> ExperimentConfig {
    let mut c = ExperimentConfig::baseline(PolicySpec::gated(PolicyParams::gated(3, 1.0, 1.0)), reps, 1);
    c.architecture.visibility = VisibilityRegime::seeded(SeededLevels::default_round_robin());
    c.architecture.agents_per_round = 4;
    c.architecture.rounds = 10;
    c
}

fn executions() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn bench_replications(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_experiment");
    group.sample_size(10);
    for reps in [100u32, 1_000] {
        let cfg = config(reps);
        group.throughput(Throughput::Elements(reps as u64));
        for (name, exec) in executions() {
            group.bench_with_input(BenchmarkId::new(name, reps), &cfg, |b, cfg| {
                b.iter(|| run_experiment_with(black_box(cfg), exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_permutation_test(c: &mut Criterion) {
    let run = run_experiment_with(&config(200), Execution::Sequential).unwrap();
    let trace = ReferenceTrace::from_trajectories(&run.trajectories, "ref");
    let sim = AttentionDistribution::from_trajectories(&run.trajectories, 48);
    let test = PermutationTest {
        resamples: 1_000,
        seed: 3,
    };
    c.bench_function("permutation_test_1000", |b| {
        b.iter(|| compare_distributions(&sim, "ref", &trace, Statistic::Tvd, test).unwrap())
    });
}

fn bench_decide(c: &mut Criterion) {
    let slate = Slate::with_size(48);
    let ledger = FeedLedger::new(48);
    let levels = SeededLevels::default_round_robin().resolve(48);
    let perm = shuffle_slate(&slate, &mut split_stream(0, &[0])).unwrap();
    let obs = AgentObservation {
        slate: render_slate(&perm, &ledger, VisibilityKind::Seeded, Some(&levels)).unwrap(),
        history: Vec::new(),
    };
    let params = PolicyParams::gated(3, 1.0, 1.0);
    let mut i = 0u64;
    c.bench_function("decide_position_gated_48", |b| {
        b.iter(|| {
            i += 1;
            decide_position_gated(&params, black_box(&obs), &mut split_stream(0, &[i])).unwrap()
        })
    });
}

criterion_group!(benches, bench_replications, bench_permutation_test, bench_decide);
criterion_main!(benches);
