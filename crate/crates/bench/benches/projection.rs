//! Per-step projection cost: the extra work subspace training adds on top
//! of a regular gradient step, monolithic vs simulated multi-node.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use twa_bench::fixture_basis;
use twa_core::distributed::{distributed_project, partition_columns, NodeScheduling};
use twa_core::harness::random_checkpoint_weights;

fn bench_project(c: &mut Criterion) {
    let (n, d) = (32usize, 100_000usize);
    let basis = fixture_basis(n, d);
    let g = random_checkpoint_weights(1, d, 7).pop().unwrap();

    let mut group = c.benchmark_group("project");
    group.sample_size(20);
    group.bench_function("monolithic", |b| {
        b.iter(|| black_box(basis.project(black_box(&g)).unwrap().projected.len()))
    });
    for k in [2usize, 4] {
        let shards = vec![g.clone(); k];
        group.bench_with_input(BenchmarkId::new("distributed", k), &k, |b, &k| {
            let mut nodes = partition_columns(&basis, k).unwrap();
            b.iter(|| {
                let out = distributed_project(
                    basis.partition(),
                    &mut nodes,
                    black_box(&shards),
                    NodeScheduling::Sequential,
                )
                .unwrap();
                black_box(out.len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_project);
criterion_main!(benches);
