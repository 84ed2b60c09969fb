use std::hint::black_box;

use cohort_lte::bench::{run_comparison, BenchSpec};
use cohort_lte::exec::Exec;
use cohort_lte::metrics::{bootstrap_report, AnalysisOptions, BootstrapOptions};
use cohort_lte::panel::{aggregate, PanelMode};
use cohort_lte::simulate::{generate_dataset, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn aggregation(c: &mut Criterion) {
    let data = generate_dataset(
        &SimConfig {
            n_users: 50_000,
            ..SimConfig::default()
        },
        Exec::Parallel,
    )
    .unwrap();
    let mut g = c.benchmark_group("aggregate_50k");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| aggregate(black_box(&data), PanelMode::Metric, None, exec))
        });
    }
    g.finish();
}

fn simulation(c: &mut Criterion) {
    let cfg = SimConfig {
        n_users: 50_000,
        ..SimConfig::default()
    };
    let mut g = c.benchmark_group("simulate_50k");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let data = generate_dataset(&SimConfig::default(), Exec::Parallel).unwrap();
    let opts = AnalysisOptions::default();
    let mut g = c.benchmark_group("bootstrap_50x10k");
    g.sample_size(10);
    for (name, exec) in MODES {
        let boot = BootstrapOptions {
            replicates: 50,
            seed: 1,
            exec,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_report(&data, &opts, &boot).unwrap())
        });
    }
    g.finish();
}

fn comparison(c: &mut Criterion) {
    let mut spec = BenchSpec::comparison();
    spec.n_sims = 8;
    let mut g = c.benchmark_group("comparison_8_sims");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_comparison(&spec, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, aggregation, simulation, bootstrap, comparison);
criterion_main!(benches);
