use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use aurasim_core::grid::{GridEntry, NeighborGrid};
use aurasim_core::testkit::{random_entries, FuzzRng};
use aurasim_core::{Aabb, Vec3};

fn bench(c: &mut Criterion) {
    let bounds = Aabb::new([0.0; 3], [40.0; 3]);
    let entries = random_entries(20_000, &bounds, &mut FuzzRng::new(9));
    let mut grid = NeighborGrid::new(bounds, 1.5);
    for e in &entries {
        grid.insert(*e).unwrap();
    }

    let mut g = c.benchmark_group("grid");
    g.bench_function("build_20000", |b| {
        b.iter(|| {
            let mut grid = NeighborGrid::new(bounds, 1.5);
            for e in &entries {
                grid.insert(*e).unwrap();
            }
            grid
        })
    });
    g.bench_function("neighbors_1000_queries", |b| {
        let mut out: Vec<GridEntry<u32>> = Vec::new();
        b.iter(|| {
            let mut n = 0;
            for e in entries.iter().take(1000) {
                out.clear();
                grid.neighbors_into(e.pos, 1.5, Some(e.gid), &mut out).unwrap();
                n += out.len();
            }
            n
        })
    });
    g.bench_function("move_all_20000", |b| {
        b.iter_batched(
            || grid.clone(),
            |mut grid| {
                for (i, e) in entries.iter().enumerate() {
                    let d = if i % 2 == 0 { 0.1 } else { -0.1 };
                    let p = e.pos + Vec3::new(d, d, d);
                    let p = Vec3(p.0.map(|x| x.clamp(0.0, 39.99)));
                    grid.move_to(e.key, p).unwrap();
                }
                grid
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
