use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cloudann::bench::{Backend, BenchIndex, Harness, Workload, WorkloadSpec};
use cloudann::cache::CacheConfig;
use cloudann::cluster::{build_cluster_index, build_cluster_index_with, ClusterBuildParams};
use cloudann::dataset::{brute_force_topk, brute_force_topk_with, VectorDataset};
use cloudann::graph::{build_graph_index_with, train_pq, GraphBuildParams};
use cloudann::kmeans::kmeans;
use cloudann::par::{self, Exec};
use cloudann::storage::{ClockMode, MemoryStore, StorageProfile};
use cloudann::synthetic::GaussianMixture;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn data(n: usize, dim: usize) -> (VectorDataset, VectorDataset) {
    let mix = GaussianMixture::new(dim, 32, 1.0, 7);
    (mix.sample(n, 8), mix.sample(100, 9))
}

fn bench_brute_force(c: &mut Criterion) {
    let (base, queries) = data(10_000, 32);
    let mut g = c.benchmark_group("brute_force");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| brute_force_topk_with(exec, &base, &queries, 10).unwrap()));
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let (base, _) = data(10_000, 32);
    let rows = base.to_f32_matrix();
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| kmeans(exec, black_box(&rows), 32, 100, 10, 1)));
    }
    g.finish();
}

fn bench_pq(c: &mut Criterion) {
    let (base, _) = data(5_000, 32);
    let mut g = c.benchmark_group("train_pq");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| train_pq(exec, &base, 8, 1).unwrap()));
    }
    g.finish();
}

fn bench_builds(c: &mut Criterion) {
    let (base, _) = data(3_000, 32);
    let graph = GraphBuildParams {
        r: 16,
        l_build: 48,
        sector_len: 512,
        ..Default::default()
    };
    let cluster = ClusterBuildParams::default();
    let mut g = c.benchmark_group("build");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("vamana", name), &exec, |b, &exec| {
            b.iter(|| build_graph_index_with(exec, &base, &graph, "g").unwrap())
        });
        g.bench_with_input(BenchmarkId::new("cluster", name), &exec, |b, &exec| {
            b.iter(|| build_cluster_index_with(exec, &base, &cluster, "c").unwrap())
        });
    }
    g.finish();
}

// one sweep column per concurrency level, as the harness schedules them
fn bench_sweep_cells(c: &mut Criterion) {
    let (base, queries) = data(5_000, 32);
    let truth = brute_force_topk(&base, &queries, 10).unwrap();
    let built = build_cluster_index(&base, &ClusterBuildParams::default(), "c").unwrap();
    let objects = MemoryStore::new();
    built.publish(&objects);
    let harness = Harness {
        objects,
        backend: Backend::Simulated {
            profile: StorageProfile::default(),
            mode: ClockMode::Virtual,
        },
        cache: CacheConfig::default(),
    };
    let workload = Workload {
        index: BenchIndex::Cluster(&built.index),
        queries: &queries,
        truth: &truth,
    };
    let concurrencies = [1usize, 4, 16, 64];
    let mut g = c.benchmark_group("sweep_cells");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                par::map_slice(exec, &concurrencies, |&concurrency| {
                    let spec = WorkloadSpec {
                        value: 8,
                        concurrency,
                        ..Default::default()
                    };
                    harness.run_cell(&workload, &spec).unwrap().qps
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_brute_force, bench_kmeans, bench_pq, bench_builds, bench_sweep_cells);
criterion_main!(benches);
