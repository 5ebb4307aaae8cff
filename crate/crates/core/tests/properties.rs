use std::collections::{HashMap, HashSet};
use std::sync::{Arc, OnceLock};

use bytes::Bytes;
use proptest::prelude::*;

use cloudann::cache::{CacheConfig, InsertOutcome, SegmentCache, SegmentKey, SlruCache};
use cloudann::cluster::{build_cluster_index, decode_posting_list, BuiltCluster, ClusterBuildParams};
use cloudann::costmodel::{
    advise, cluster_cost, graph_cost, AdvisorConfig, BktScaling, ClusterCostInputs, EnvParams, GraphCostInputs, Workload,
};
use cloudann::dataset::{
    brute_force_topk, encode_vectors, parse_vectors, recall_at_k, squared_l2, ElemType, VecFormat, VectorDataset,
};
use cloudann::graph::{build_graph_index, BuiltGraph, GraphBuildParams};
use cloudann::search::{execute, ComputeModel, SearchTask, Step, Work};
use cloudann::storage::{CompletionKind, MemoryStore, ObjectStore, SimEngine, StorageProfile};
use cloudann::synthetic::{quantize_i8, GaussianMixture};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

// ---------------------------------------------------------------- dataset

fn f32_dataset() -> impl Strategy<Value = VectorDataset> {
    (1usize..6, 1usize..12).prop_flat_map(|(dim, count)| {
        prop::collection::vec(-1e3f32..1e3, dim * count).prop_map(move |v| VectorDataset::from_f32(dim, v).unwrap())
    })
}

fn i8_dataset() -> impl Strategy<Value = VectorDataset> {
    (1usize..6, 1usize..12).prop_flat_map(|(dim, count)| {
        prop::collection::vec(any::<i8>(), dim * count).prop_map(move |v| VectorDataset::from_i8(dim, v).unwrap())
    })
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn float_formats_round_trip(ds in f32_dataset()) {
        for format in [VecFormat::Fvecs, VecFormat::Fbin] {
            let bytes = encode_vectors(&ds, format).unwrap();
            prop_assert_eq!(&parse_vectors(&bytes, format).unwrap(), &ds);
        }
    }

    #[test]
    fn byte_formats_round_trip(ds in i8_dataset()) {
        for format in [VecFormat::Bvecs, VecFormat::I8bin] {
            let bytes = encode_vectors(&ds, format).unwrap();
            prop_assert_eq!(&parse_vectors(&bytes, format).unwrap(), &ds);
        }
    }

    #[test]
    fn brute_force_follows_row_permutation(seed in 0u64..1000, k in 1usize..8) {
        let mix = GaussianMixture::new(6, 4, 1.0, seed);
        let ds = mix.sample(60, seed + 1);
        let qs = mix.sample(5, seed + 2);
        let mut perm: Vec<usize> = (0..ds.count()).collect();
        perm.reverse();
        perm.rotate_left((seed % 60) as usize);
        let shuffled = ds.select(&perm);
        let a = brute_force_topk(&ds, &qs, k).unwrap();
        let b = brute_force_topk(&shuffled, &qs, k).unwrap();
        for q in 0..qs.count() {
            let mapped: Vec<u32> = b.ids(q).iter().map(|&i| perm[i as usize] as u32).collect();
            prop_assert_eq!(mapped.as_slice(), a.ids(q));
            prop_assert_eq!(a.dists(q), b.dists(q));
            prop_assert_eq!(recall_at_k(a.ids(q), a.ids(q), k), 1.0);
        }
    }
}

// ------------------------------------------------------------------ cache

#[derive(Debug, Clone)]
enum Op {
    Insert(u64, usize),
    Lookup(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..24, 1usize..60).prop_map(|(k, s)| Op::Insert(k, s)),
        (0u64..24).prop_map(Op::Lookup),
    ]
}

fn key(i: u64) -> SegmentKey {
    SegmentKey::new(Arc::from("p"), i)
}

proptest! {
    #![proptest_config(cases(128))]

    #[test]
    fn slru_occupancy_never_exceeds_capacity(
        capacity in 1u64..400,
        frac in 0.0f64..1.0,
        ops in prop::collection::vec(op(), 1..1000),
    ) {
        let mut c = SlruCache::new(capacity, frac).unwrap();
        for o in ops {
            match o {
                Op::Insert(k, s) => {
                    let out = c.insert(key(k), Bytes::from(vec![0u8; s]));
                    if s as u64 > capacity {
                        prop_assert_eq!(out, InsertOutcome::Bypassed);
                        prop_assert!(!c.contains(&key(k)) || c.lookup(&key(k)).map(|b| b.len()) != Some(s));
                    }
                }
                Op::Lookup(k) => {
                    c.lookup(&key(k));
                }
            }
            prop_assert!(c.used_bytes() <= c.capacity());
            prop_assert!(c.protected_bytes() <= c.protected_capacity());
        }
    }

    #[test]
    fn scan_cannot_evict_protected(
        hot in 1u64..8,
        scan in 1u64..200,
    ) {
        // the hot set fits the protected share and the scan fits the probationary share
        let capacity = 20 * (hot + scan);
        let mut c = SlruCache::new(capacity, 0.5).unwrap();
        let unit = Bytes::from_static(&[0u8; 10]);
        for i in 0..hot {
            c.insert(key(i), unit.clone());
            c.lookup(&key(i));
        }
        for i in 1000..1000 + scan {
            c.insert(key(i), unit.clone());
        }
        for i in 0..hot {
            prop_assert!(c.contains(&key(i)));
        }
    }

    #[test]
    fn read_through_accounting_closes(
        capacity in 0u64..300,
        trace in prop::collection::vec((0u64..30, 1usize..40), 1..300),
    ) {
        let cache = if capacity == 0 {
            SegmentCache::disabled()
        } else {
            SegmentCache::new(&CacheConfig::with_capacity(capacity)).unwrap()
        };
        let sizes: HashMap<u64, usize> = trace.iter().copied().collect();
        let mut requested = 0u64;
        let mut fetched = 0u64;
        for (k, _) in &trace {
            let size = sizes[k];
            let (b, hit) = cache
                .read_through(&key(*k), || {
                    fetched += size as u64;
                    Ok(Bytes::from(vec![1u8; size]))
                })
                .unwrap();
            prop_assert_eq!(b.len(), size);
            requested += size as u64;
            let _ = hit;
        }
        let s = cache.stats();
        prop_assert_eq!(s.hits + s.misses, s.lookups);
        prop_assert_eq!(s.lookups, trace.len() as u64);
        prop_assert_eq!(s.bytes_hit + s.bytes_fetched, requested);
        prop_assert_eq!(s.bytes_fetched, fetched);
    }

    #[test]
    fn repeated_trace_fully_resident(trace in prop::collection::vec(0u64..40, 1..200)) {
        let cache = SegmentCache::new(&CacheConfig::with_capacity(40 * 16)).unwrap();
        for pass in 0..2 {
            cache.reset_stats();
            for k in &trace {
                cache.read_through(&key(*k), || Ok(Bytes::from(vec![0u8; 16]))).unwrap();
            }
            if pass == 1 {
                prop_assert_eq!(cache.stats().hit_rate(), 1.0);
            }
        }
    }
}

// ---------------------------------------------------------------- storage

#[derive(Debug, Clone)]
struct Burst {
    gap: f64,
    reads: Vec<u64>,
}

fn burst() -> impl Strategy<Value = Burst> {
    (0.0f64..0.02, prop::collection::vec(1u64..4_000_000, 1..40)).prop_map(|(gap, reads)| Burst { gap, reads })
}

fn small_profile(seed: u64, dispersion: f64) -> StorageProfile {
    StorageProfile {
        ttfb_dispersion: dispersion,
        get_rate_limit: 2_000.0,
        token_burst: 20,
        bandwidth_bytes_per_sec: 100e6,
        seed,
        ..StorageProfile::default()
    }
}

fn replay(profile: &StorageProfile, schedule: &[Burst]) -> (SimEngine, Vec<(u64, f64, cloudann::storage::ReadStats)>) {
    let mut e = SimEngine::new(profile.clone()).unwrap();
    let mut done = Vec::new();
    for b in schedule {
        let t = e.now() + b.gap;
        // completions reached here stay queued for poll
        e.run_until(t);
        for (i, &len) in b.reads.iter().enumerate() {
            e.submit(len, i as u64);
        }
    }
    while let Some(c) = e.poll() {
        if let CompletionKind::Read(s) = c.kind {
            done.push((c.id, c.at, s));
        }
    }
    (e, done)
}

fn max_in_window(times: &[f64], w: f64) -> usize {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    let mut j = 0;
    let mut best = 0;
    for i in 0..t.len() {
        while j < t.len() && t[j] < t[i] + w {
            j += 1;
        }
        best = best.max(j - i);
    }
    best
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn simulator_respects_limits(schedule in prop::collection::vec(burst(), 1..80), seed in 0u64..5) {
        let p = small_profile(seed, 0.5);
        let (e, done) = replay(&p, &schedule);
        for w in [1.0, 2.0, 3.5] {
            let bound = p.get_rate_limit * w + p.token_burst as f64;
            prop_assert!(max_in_window(e.grant_times(), w) as f64 <= bound + 1e-9);
        }
        for &b in e.window_bytes() {
            prop_assert!(b <= p.bandwidth_bytes_per_sec * (1.0 + 1e-9));
        }
        let submitted: usize = schedule.iter().map(|b| b.reads.len()).sum();
        prop_assert_eq!(done.len(), submitted);
        for (_, _, s) in &done {
            prop_assert_eq!(s.latency(), s.queue_wait + s.ttfb + s.transfer);
        }
    }

    #[test]
    fn simulator_is_deterministic(schedule in prop::collection::vec(burst(), 1..30), seed in 0u64..1000) {
        let p = small_profile(seed, 0.8);
        let (_, a) = replay(&p, &schedule);
        let (_, b) = replay(&p, &schedule);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lone_transfer_gets_the_whole_pipe(len in 1u64..50_000_000) {
        let p = small_profile(0, 0.0);
        let (_, done) = replay(&p, &[Burst { gap: 0.0, reads: vec![len] }]);
        let expect = len as f64 / p.bandwidth_bytes_per_sec;
        prop_assert!((done[0].2.transfer.as_secs_f64() - expect).abs() < 1e-9);
    }

    #[test]
    fn congestion_is_monotone(len in 1_000u64..5_000_000, max in 2usize..16) {
        let p = StorageProfile { token_burst: 1_000, ..small_profile(0, 0.0) };
        let mut prev = 0.0;
        for m in 1..=max {
            let (_, done) = replay(&p, &[Burst { gap: 0.0, reads: vec![len; m] }]);
            let mean = done.iter().map(|d| d.2.latency().as_secs_f64()).sum::<f64>() / m as f64;
            prop_assert!(mean + 1e-12 >= prev);
            prev = mean;
        }
    }
}

// ---------------------------------------------------------------- cluster

struct ClusterFixture {
    ds: VectorDataset,
    queries: VectorDataset,
    /// Single-leaf tree, so centroid selection is exact.
    exact: BuiltCluster,
    tree: BuiltCluster,
    store: MemoryStore,
}

fn cluster_fixture() -> &'static ClusterFixture {
    static F: OnceLock<ClusterFixture> = OnceLock::new();
    F.get_or_init(|| {
        let mix = GaussianMixture::new(8, 12, 1.0, 3);
        let ds = mix.sample(1500, 4);
        let queries = mix.sample(40, 5);
        let p = ClusterBuildParams {
            centroid_pct: 4.0,
            num_replica: 3,
            epsilon: 0.4,
            ..ClusterBuildParams::default()
        };
        let exact = build_cluster_index(&ds, &ClusterBuildParams { bkt_leaf: 10_000, ..p.clone() }, "exact").unwrap();
        let tree = build_cluster_index(&ds, &ClusterBuildParams { bkt_leaf: 4, ..p }, "tree").unwrap();
        let store = MemoryStore::new();
        exact.publish(&store);
        tree.publish(&store);
        ClusterFixture {
            ds,
            queries,
            exact,
            tree,
            store,
        }
    })
}

fn list_members(built: &BuiltCluster, row_bytes: usize) -> Vec<Vec<u32>> {
    let by_key: HashMap<&str, &Bytes> = built.segments.iter().map(|(k, v)| (k.as_str(), v)).collect();
    built
        .index
        .postings()
        .iter()
        .map(|p| {
            decode_posting_list(by_key[p.key.as_str()], row_bytes)
                .unwrap()
                .map(|(id, _)| id)
                .collect()
        })
        .collect()
}

#[test]
fn coverage_and_replication_cap() {
    let f = cluster_fixture();
    for built in [&f.exact, &f.tree] {
        let lists = list_members(built, f.ds.row_bytes());
        let mut copies = vec![0usize; f.ds.count()];
        for l in &lists {
            for &id in l {
                copies[id as usize] += 1;
            }
        }
        let centroids = built.index.centroids();
        for v in 0..f.ds.count() {
            assert!(copies[v] >= 1 && copies[v] <= built.index.params().num_replica);
            let nearest = (0..centroids.count())
                .map(|c| (squared_l2(f.ds.row(v), centroids.row(c)).unwrap(), c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert!(lists[nearest].contains(&(v as u32)), "vector {v} missing from its nearest list");
        }
    }
}

fn kth_dist(built: &BuiltCluster, store: &MemoryStore, q: &VectorDataset, qi: usize, nprobe: usize, k: usize) -> f64 {
    let mut t = built.index.search_task(q.row(qi).into(), nprobe, k).unwrap();
    let (out, _) = execute(&mut t, store, &SegmentCache::disabled(), ComputeModel::default()).unwrap();
    out.dists.last().copied().unwrap_or(f64::INFINITY)
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn kth_distance_non_increasing_in_nprobe(qi in 0usize..40, k in 1usize..20) {
        let f = cluster_fixture();
        let n = f.exact.index.list_count();
        let mut prev = f64::INFINITY;
        for nprobe in 1..=n {
            let d = kth_dist(&f.exact, &f.store, &f.queries, qi, nprobe, k);
            prop_assert!(d <= prev);
            prev = d;
        }
    }

    #[test]
    fn single_wave_and_exact_byte_accounting(
        qi in 0usize..40,
        nprobe in 1usize..60,
        warm in prop::collection::vec(any::<bool>(), 60),
    ) {
        let f = cluster_fixture();
        let idx = &f.tree.index;
        let nprobe = nprobe.min(idx.list_count());
        let cache = SegmentCache::new(&CacheConfig::with_capacity(64 << 20)).unwrap();
        for (i, p) in idx.postings().iter().enumerate() {
            if warm[i % warm.len()] {
                let fetch = idx.fetch_for(i as u32);
                cache.warm(fetch.key, f.store.get(&fetch.request).unwrap().0);
                let _ = p;
            }
        }
        let sel = idx.bkt_select(f.queries.row(qi), nprobe).unwrap();
        let missed: Vec<u32> = sel.ids.iter().copied().filter(|&l| !cache.contains(&idx.fetch_for(l).key)).collect();
        let expected_bytes: u64 = missed.iter().map(|&l| idx.postings()[l as usize].bytes).sum();
        let mut t = idx.search_task(f.queries.row(qi).into(), nprobe, 10).unwrap();
        let (out, stats) = execute(&mut t, &f.store, &cache, ComputeModel::default()).unwrap();
        prop_assert!(stats.roundtrips <= 1);
        prop_assert_eq!(stats.roundtrips == 1, !missed.is_empty());
        prop_assert_eq!(stats.requests, missed.len() as u64);
        prop_assert_eq!(stats.bytes_read, expected_bytes);
        prop_assert_eq!(stats.cache_hits + stats.cache_misses, nprobe as u64);
        prop_assert_eq!(out.posting_lists_visited as usize, nprobe);
    }
}

// ------------------------------------------------------------------ graph

struct GraphFixture {
    queries: VectorDataset,
    built: BuiltGraph,
    store: MemoryStore,
}

fn graph_params() -> GraphBuildParams {
    GraphBuildParams {
        r: 8,
        l_build: 24,
        sector_len: 512,
        seed: 11,
        ..GraphBuildParams::default()
    }
}

fn graph_fixture() -> &'static GraphFixture {
    static F: OnceLock<GraphFixture> = OnceLock::new();
    F.get_or_init(|| {
        let mix = GaussianMixture::new(8, 6, 1.0, 21);
        let ds = mix.sample(600, 22);
        let built = build_graph_index(&ds, &graph_params(), "g").unwrap();
        let store = MemoryStore::new();
        built.publish(&store);
        GraphFixture {
            queries: mix.sample(40, 23),
            built,
            store,
        }
    })
}

#[test]
fn degree_bound_and_seeded_build() {
    let mix = GaussianMixture::new(8, 6, 1.0, 21);
    let ds = mix.sample(600, 22);
    let f = graph_fixture();
    assert!(f.built.adjacency.iter().all(|a| a.len() <= graph_params().r));
    assert!(f.built.index.stats().max_degree <= graph_params().r);
    let again = build_graph_index(&ds, &graph_params(), "g").unwrap();
    assert_eq!(again.adjacency, f.built.adjacency);
    assert_eq!(again.index, f.built.index);
    assert_eq!(again.data, f.built.data);
}

/// Counts the fetch rounds a task issues.
struct Counting<T> {
    inner: T,
    rounds: usize,
}

impl<T: SearchTask> SearchTask for Counting<T> {
    fn start(&mut self) -> cloudann::Result<(Step, Work)> {
        let out = self.inner.start()?;
        self.rounds += matches!(out.0, Step::Fetch(_)) as usize;
        Ok(out)
    }

    fn resume(&mut self, segments: Vec<Bytes>) -> cloudann::Result<(Step, Work)> {
        let out = self.inner.resume(segments)?;
        self.rounds += matches!(out.0, Step::Fetch(_)) as usize;
        Ok(out)
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn rt_counts_storage_rounds(
        qi in 0usize..40,
        search_len in 5usize..80,
        beam in 1usize..10,
        warm in prop::collection::vec(0.0f64..1.0, 1),
        seed in any::<u64>(),
    ) {
        let f = graph_fixture();
        let idx = &f.built.index;
        let cache = SegmentCache::new(&CacheConfig::with_capacity(64 << 20)).unwrap();
        let units = idx.layout().unit_count(idx.node_count());
        let mut h = seed;
        for u in 0..units {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            if ((h >> 11) as f64 / (1u64 << 53) as f64) < warm[0] {
                let fetch = idx.fetch_for_unit(u);
                cache.warm(fetch.key, f.store.get(&fetch.request).unwrap().0);
            }
        }
        let mut t = Counting {
            inner: idx.search_task(f.queries.row(qi).into(), search_len, beam, 5).unwrap(),
            rounds: 0,
        };
        let (out, stats) = execute(&mut t, &f.store, &cache, ComputeModel::default()).unwrap();
        prop_assert_eq!(stats.rounds.len(), t.rounds);
        let storage_rounds = stats.rounds.iter().filter(|r| !r.fully_cached()).count();
        prop_assert_eq!(stats.roundtrips as usize, storage_rounds);
        prop_assert_eq!(stats.cache_hits + stats.cache_misses, stats.rounds.iter().map(|r| r.units as u64).sum::<u64>());
        prop_assert!(stats.rounds.iter().all(|r| r.units as usize <= beam));
        prop_assert!(out.dists.windows(2).all(|w| w[0] <= w[1]));
    }
}

// -------------------------------------------------------------- costmodel

fn env() -> impl Strategy<Value = EnvParams> {
    (1e-3f64..0.2, 1e6f64..1e10, 1e-10f64..1e-7, 1e-10f64..1e-7).prop_map(|(ttfb, bandwidth, c_dist, c_centroid)| EnvParams {
        ttfb,
        bandwidth,
        c_dist,
        c_centroid,
        ..EnvParams::default()
    })
}

proptest! {
    #![proptest_config(cases(256))]

    #[test]
    fn graph_cost_monotone_linear_and_floored(
        e in env(),
        rt in 0.0f64..200.0,
        k in 1u64..256,
        bytes in 0.0f64..1e6,
        dim in 1u64..2048,
    ) {
        let base = GraphCostInputs { rt, k, bytes_per_round: bytes, dim };
        let c = graph_cost(&e, &base).total;
        prop_assert!(c >= rt * e.ttfb);
        let bumps = [
            GraphCostInputs { rt: rt + 1.0, ..base },
            GraphCostInputs { k: k + 1, ..base },
            GraphCostInputs { bytes_per_round: bytes + 1.0, ..base },
            GraphCostInputs { dim: dim + 1, ..base },
        ];
        for b in bumps {
            prop_assert!(graph_cost(&e, &b).total >= c);
        }
        let double = graph_cost(&e, &GraphCostInputs { rt: 2.0 * rt, ..base }).total;
        prop_assert!((double - 2.0 * c).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn cluster_cost_monotone_and_linear(
        e in env(),
        n in 1u64..100_000,
        nprobe in 1u64..1000,
        l in 0u64..100_000,
        bytes in 0u64..1 << 30,
        dim in 1u64..2048,
        literal in any::<bool>(),
    ) {
        let scaling = if literal { BktScaling::NLogNprobe } else { BktScaling::NprobeLogN };
        let base = ClusterCostInputs { n, nprobe, l, bytes_fetched: bytes, dim };
        let c = cluster_cost(&e, &base, scaling);
        prop_assert!(c.total >= c.floor);
        let bumps = [
            ClusterCostInputs { n: n + 1, ..base },
            ClusterCostInputs { nprobe: nprobe + 1, ..base },
            ClusterCostInputs { l: l + 1, ..base },
            ClusterCostInputs { bytes_fetched: bytes + 1, ..base },
            ClusterCostInputs { dim: dim + 1, ..base },
        ];
        for b in bumps {
            prop_assert!(cluster_cost(&e, &b, scaling).total >= c.total);
        }
        // linear in l and bytes: equal steps give equal increments
        let step = |b: ClusterCostInputs| cluster_cost(&e, &b, scaling).total;
        let dl1 = step(ClusterCostInputs { l: l + 10, ..base }) - c.total;
        let dl2 = step(ClusterCostInputs { l: l + 20, ..base }) - step(ClusterCostInputs { l: l + 10, ..base });
        prop_assert!((dl1 - dl2).abs() <= 1e-12 * c.total.max(1.0));
        let db1 = step(ClusterCostInputs { bytes_fetched: bytes + 1000, ..base }) - c.total;
        let db2 = step(ClusterCostInputs { bytes_fetched: bytes + 2000, ..base })
            - step(ClusterCostInputs { bytes_fetched: bytes + 1000, ..base });
        prop_assert!((db1 - db2).abs() <= 1e-12 * c.total.max(1.0));
    }

    #[test]
    fn advise_is_total_and_pure(
        e in env(),
        recall in -1.0f64..2.0,
        concurrency in any::<u32>(),
        dim in 0usize..10_000,
        float in any::<bool>(),
    ) {
        let w = Workload {
            target_recall: recall,
            concurrency,
            dim,
            elem: if float { ElemType::F32 } else { ElemType::I8 },
        };
        let cfg = AdvisorConfig::default();
        prop_assert_eq!(advise(&e, &w, &cfg), advise(&e, &w, &cfg));
    }
}

#[test]
fn quantized_dataset_keeps_shape() {
    let mix = GaussianMixture::new(5, 3, 1.0, 1);
    let ds = mix.sample(50, 2);
    let q = quantize_i8(&ds, 20.0);
    assert_eq!((q.count(), q.dim(), q.elem()), (50, 5, ElemType::I8));
    let seen: HashSet<u32> = brute_force_topk(&q, &q.select(&[0, 1]), 1).unwrap().ids(0).iter().copied().collect();
    assert_eq!(seen.len(), 1);
}
