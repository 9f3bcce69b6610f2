use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use aurasim_core::transport::inproc;
use aurasim_core::{ModelKind, RankRuntime, RunConfig, RunHooks};

fn runtime(model: ModelKind) -> RankRuntime {
    let mut c = RunConfig::default();
    c.model = model;
    c.population.count = 5000;
    c.sim.space.hi = [20.0; 3];
    let ep = inproc::mesh(1, c.sim.batch_bytes).pop().unwrap();
    RankRuntime::new(ep, c, RunHooks::default()).unwrap()
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("step");
    g.sample_size(20);
    for (name, model) in [("clustering_5000", ModelKind::Clustering), ("sir_5000", ModelKind::Sir)] {
        g.bench_function(name, |b| {
            b.iter_batched(
                || runtime(model),
                |mut rt| {
                    rt.step().unwrap();
                    rt
                },
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
