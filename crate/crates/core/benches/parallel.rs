use std::hint::black_box;
use std::time::Duration;

use cetsp::instance::{generate_indexed, GenConfig, RadiusKind};
use cetsp::par::ExecMode;
use cetsp::policy::{Policy, PolicyConfig};
use cetsp::training::{evaluate, greedy_mean, Baseline};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> Vec<ExecMode> {
    if cfg!(feature = "parallel") {
        vec![ExecMode::Sequential, ExecMode::Parallel]
    } else {
        vec![ExecMode::Sequential]
    }
}

fn greedy_rollouts(c: &mut Criterion) {
    let gen = GenConfig::new(vec![20], RadiusKind::Random, 11);
    let set: Vec<_> = (0..16).map(|i| generate_indexed(&gen, 20, i)).collect();
    let cfg = PolicyConfig { layers: 2, heads: 4, dim: 64, ..PolicyConfig::default() };
    let policy = Policy::new(cfg, 0).unwrap();
    let mut g = c.benchmark_group("greedy_rollouts_n20x16");
    g.sample_size(10).measurement_time(Duration::from_secs(5));
    for mode in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| black_box(greedy_mean(&policy, &set, m).unwrap()))
        });
    }
    g.finish();
}

fn insertion_baselines(c: &mut Criterion) {
    let gen = GenConfig::new(vec![50], RadiusKind::Random, 12);
    let set: Vec<_> = (0..32).map(|i| generate_indexed(&gen, 50, i)).collect();
    let mut g = c.benchmark_group("insertion_n50x32");
    g.sample_size(10).measurement_time(Duration::from_secs(5));
    for mode in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| black_box(evaluate(None, &set, 8, false, &[Baseline::CheapestInsertion], m).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, greedy_rollouts, insertion_baselines);
criterion_main!(benches);
