//! Online cost of the reduced models against the full-order model on the
//! nozzle benchmark.

use std::hint::black_box;

use consrom::harness::{run_fom, run_method, run_training_foms, train, Method, RunConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn trajectories(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let foms = run_training_foms(&cfg).expect("training runs");
    let trained = train(&cfg, &foms).expect("training");
    let model = cfg.model_at(cfg.mu).expect("model");

    let mut group = c.benchmark_group("trajectory");
    group.sample_size(10);
    group.bench_function("fom", |b| b.iter(|| black_box(run_fom(&cfg, cfg.mu).expect("fom"))));
    for method in Method::ALL {
        group.bench_function(method.name(), |b| {
            b.iter(|| black_box(run_method(&cfg, &model, method, &trained, cfg.mu).expect("rom")))
        });
    }
    group.finish();
}

criterion_group!(benches, trajectories);
criterion_main!(benches);
