//! Second implementations and brute-force references for the library's
//! core computations.

use std::sync::OnceLock;

use cloudann::cache::SegmentCache;
use cloudann::cluster::{build_cluster_index, Bkt, ClusterBuildParams};
use cloudann::dataset::{
    brute_force_topk, recall_at_k, squared_l2, write_vectors, GroundTruth, VecFormat, VectorData, VectorDataset,
};
use cloudann::graph::{build_graph_index, pq_distance, train_pq, BuiltGraph, GraphBuildParams};
use cloudann::par::Exec;
use cloudann::search::{execute, ComputeModel};
use cloudann::storage::MemoryStore;
use cloudann::synthetic::GaussianMixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Desk {
    base: VectorDataset,
    queries: VectorDataset,
    truth: GroundTruth,
}

/// 10,000 x 32 float set with 200 queries.
fn desk() -> &'static Desk {
    static D: OnceLock<Desk> = OnceLock::new();
    D.get_or_init(|| {
        let mix = GaussianMixture::new(32, 64, 1.0, 7);
        let base = mix.sample(10_000, 8);
        let queries = mix.sample(200, 9);
        let truth = brute_force_topk(&base, &queries, 10).unwrap();
        Desk { base, queries, truth }
    })
}

fn desk_graph() -> &'static (BuiltGraph, MemoryStore) {
    static G: OnceLock<(BuiltGraph, MemoryStore)> = OnceLock::new();
    G.get_or_init(|| {
        let p = GraphBuildParams {
            r: 32,
            ..GraphBuildParams::default()
        };
        let g = build_graph_index(&desk().base, &p, "desk").unwrap();
        let store = MemoryStore::new();
        g.publish(&store);
        (g, store)
    })
}

fn random_f32(count: usize, dim: usize, seed: u64) -> VectorDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    VectorDataset::from_f32(dim, data).unwrap()
}

fn floats(ds: &VectorDataset) -> &[f32] {
    match ds.data() {
        VectorData::F32(v) => v,
        VectorData::I8(_) => panic!("expected float data"),
    }
}

fn fnv(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[test]
fn fvecs_file_matches_byte_level_reader() {
    let ds = &desk().base;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.fvecs");
    write_vectors(ds, &path, VecFormat::Fvecs).unwrap();
    let loaded = cloudann::dataset::load_vectors(&path, VecFormat::Fvecs).unwrap();
    assert_eq!((loaded.count(), loaded.dim()), (10_000, 32));

    let raw = std::fs::read(&path).unwrap();
    let mut payload = Vec::new();
    let mut at = 0;
    let mut rows = 0;
    while at < raw.len() {
        let dim = i32::from_le_bytes(raw[at..at + 4].try_into().unwrap()) as usize;
        assert_eq!(dim, 32);
        payload.extend_from_slice(&raw[at + 4..at + 4 + 4 * dim]);
        at += 4 + 4 * dim;
        rows += 1;
    }
    assert_eq!(rows, 10_000);
    let ours = fnv(floats(&loaded).iter().flat_map(|x| x.to_le_bytes()));
    assert_eq!(ours, fnv(payload));
}

#[test]
fn squared_l2_matches_double_reference() {
    let ds = random_f32(200, 64, 3);
    for i in 0..100 {
        let (a, b) = (ds.row(2 * i), ds.row(2 * i + 1));
        let (x, y) = (a.to_f32(), b.to_f32());
        let reference: f64 = x.iter().zip(&y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
        let got = squared_l2(a, b).unwrap();
        assert!((got - reference).abs() <= 1e-5 * reference.max(f64::MIN_POSITIVE), "{got} vs {reference}");
    }
}

/// Insertion-based top-k over ascending ids: a candidate displaces the
/// current worst only when strictly closer.
fn insertion_topk(base: &VectorDataset, query: &[f32], k: usize) -> Vec<u32> {
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
    for id in 0..base.count() {
        let row = base.row(id).to_f32();
        let d: f64 = row.iter().zip(query).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.iter().position(|&(bd, _)| d < bd).unwrap_or(best.len());
        best.insert(pos, (d, id as u32));
        best.truncate(k);
    }
    best.into_iter().map(|(_, id)| id).collect()
}

#[test]
fn brute_force_matches_insertion_selection() {
    let base = random_f32(1000, 16, 5);
    let queries = random_f32(30, 16, 6);
    let gt = brute_force_topk(&base, &queries, 10).unwrap();
    for q in 0..queries.count() {
        assert_eq!(gt.ids(q), insertion_topk(&base, &queries.row(q).to_f32(), 10).as_slice());
    }
}

#[test]
fn bkt_selection_tracks_brute_force_centroids() {
    let mix = GaussianMixture::new(16, 40, 1.0, 12);
    let centroids = mix.sample(1000, 13);
    let queries = mix.sample(100, 14);
    let defaults = ClusterBuildParams::default();
    let tree = Bkt::build(Exec::default(), &centroids, 8, defaults.bkt_leaf, defaults.kmeans_iters, 0);
    let truth = brute_force_topk(&centroids, &queries, 32).unwrap();
    let mut total = 0.0;
    for q in 0..queries.count() {
        let sel = tree.select(&centroids, queries.row(q), 32, 32 * defaults.bkt_check_factor);
        total += recall_at_k(&sel.ids, truth.ids(q), 32);
    }
    let recall = total / queries.count() as f64;
    assert!(recall >= 0.95, "selection recall {recall}");
}

fn cluster_recalls(params: &ClusterBuildParams, values: &[usize]) -> Vec<Vec<f64>> {
    let d = desk();
    let built = build_cluster_index(&d.base, params, "sweep").unwrap();
    let store = MemoryStore::new();
    built.publish(&store);
    values
        .iter()
        .map(|&nprobe| {
            (0..d.queries.count())
                .map(|q| {
                    let mut t = built.index.search_task(d.queries.row(q).into(), nprobe, 10).unwrap();
                    let (out, _) = execute(&mut t, &store, &SegmentCache::disabled(), ComputeModel::default()).unwrap();
                    recall_at_k(&out.ids, d.truth.ids(q), 10)
                })
                .collect()
        })
        .collect()
}

#[test]
fn cluster_recall_grows_with_nprobe() {
    let params = ClusterBuildParams {
        centroid_pct: 4.0,
        num_replica: 8,
        ..ClusterBuildParams::default()
    };
    assert_eq!(params.centroid_count(10_000), 400);
    let values = [8, 16, 32, 64, 128, 256, 400];
    let recalls = cluster_recalls(&params, &values);
    for q in 0..desk().queries.count() {
        for w in recalls.windows(2) {
            assert!(w[1][q] >= w[0][q], "query {q} recall dropped");
        }
    }
    let means: Vec<f64> = recalls.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let first = means.iter().position(|&m| m >= 0.99).expect("never reached 0.99");
    assert!(values[first] < 400, "means {means:?}");
}

#[test]
fn list_sizes_follow_centroids_and_replicas() {
    let base = &desk().base;
    let stats = |pct: f64, replica: usize| {
        let p = ClusterBuildParams {
            centroid_pct: pct,
            num_replica: replica,
            ..ClusterBuildParams::default()
        };
        build_cluster_index(base, &p, "s").unwrap().index.stats()
    };
    assert!(stats(8.0, 8).mean_list_bytes < stats(4.0, 8).mean_list_bytes);
    let totals: Vec<u64> = [1, 2, 4, 8].iter().map(|&r| stats(4.0, r).total_bytes).collect();
    assert!(totals.windows(2).all(|w| w[1] >= w[0]), "{totals:?}");
    assert_eq!(stats(4.0, 1).replication_ratio, 1.0);
}

#[test]
fn graph_reaches_target_recall() {
    let d = desk();
    let (g, store) = desk_graph();
    let mut total = 0.0;
    for q in 0..d.queries.count() {
        let mut t = g.index.search_task(d.queries.row(q).into(), 128, 4, 10).unwrap();
        let (out, _) = execute(&mut t, store, &SegmentCache::disabled(), ComputeModel::default()).unwrap();
        total += recall_at_k(&out.ids, d.truth.ids(q), 10);
    }
    let recall = total / d.queries.count() as f64;
    assert!(recall >= 0.95, "recall@10 at search_len 128: {recall}");
}

/// Mean rt at the smallest swept search_len reaching `target` recall,
/// interpolated between neighbouring cells.
fn rt_at_recall(beam: usize, target: f64) -> f64 {
    let d = desk();
    let (g, store) = desk_graph();
    let mut prev: Option<(f64, f64)> = None;
    for search_len in (10..=640).step_by(10) {
        let (mut recall, mut rt) = (0.0, 0.0);
        for q in 0..d.queries.count() {
            let mut t = g.index.search_task(d.queries.row(q).into(), search_len, beam, 10).unwrap();
            let (out, stats) = execute(&mut t, store, &SegmentCache::disabled(), ComputeModel::default()).unwrap();
            recall += recall_at_k(&out.ids, d.truth.ids(q), 10);
            rt += stats.roundtrips as f64;
        }
        let n = d.queries.count() as f64;
        let (recall, rt) = (recall / n, rt / n);
        if recall >= target {
            return match prev {
                Some((r0, t0)) if r0 < recall => t0 + (target - r0) / (recall - r0) * (rt - t0),
                _ => rt,
            };
        }
        prev = Some((recall, rt));
    }
    panic!("W={beam} never reached recall {target}");
}

#[test]
fn wider_beam_needs_fewer_roundtrips() {
    let (w8, w2) = (rt_at_recall(8, 0.95), rt_at_recall(2, 0.95));
    assert!(w8 < w2, "rt W=8 {w8} vs W=2 {w2}");
}

fn pq_relative_error(chunks: usize) -> f64 {
    let base = random_f32(5000, 64, 31);
    let queries = random_f32(50, 64, 32);
    let (book, codes) = train_pq(Exec::default(), &base, chunks, 0).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for q in 0..queries.count() {
        let table = book.lookup_table(&queries.row(q).to_f32());
        for v in (0..base.count()).step_by(25) {
            let exact = squared_l2(queries.row(q), base.row(v)).unwrap();
            let approx = pq_distance(&table, &codes[v * chunks..(v + 1) * chunks]) as f64;
            total += (approx - exact).abs() / exact;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn more_pq_chunks_reduce_distance_error() {
    let (e8, e4) = (pq_relative_error(8), pq_relative_error(4));
    assert!(e8 < e4, "QD=8 error {e8} vs QD=4 {e4}");
}

#[test]
fn pq_distance_correlates_with_exact() {
    let (g, _) = desk_graph();
    let base = &desk().base;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let book = g.index.codebook();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(0..base.count()), rng.random_range(0..base.count()));
        let table = book.lookup_table(&base.row(a).to_f32());
        xs.push(pq_distance(&table, g.index.code(b as u32)) as f64);
        ys.push(squared_l2(base.row(a), base.row(b)).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let r = cov / (var(&xs, mx) * var(&ys, my)).sqrt();
    assert!(r > 0.9, "correlation {r}");
}
