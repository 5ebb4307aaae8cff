//! Two-pass Vamana construction over an in-memory `f32` matrix.
//!
//! Points are inserted in a seeded random order, in fixed-size batches: every
//! point of a batch searches the graph as it stood before the batch, and the
//! batch's edge updates are merged in order afterwards. The result depends
//! only on the seed and batch size, never on thread scheduling.

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::l2_f32;
use crate::par::{self, Exec};

pub const BUILD_BATCH: usize = 256;

pub(crate) struct Points<'a> {
    pub rows: &'a [f32],
    pub dim: usize,
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    fn row(&self, i: u32) -> &[f32] {
        let i = i as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn dist(&self, a: u32, b: u32) -> f32 {
        l2_f32(self.row(a), self.row(b))
    }
}

/// The point closest to the dataset mean.
pub(crate) fn medoid(points: &Points<'_>) -> u32 {
    let n = points.len();
    let mut mean = vec![0f64; points.dim];
    for row in points.rows.chunks_exact(points.dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| (m / n as f64) as f32).collect();
    crate::kmeans::nearest(&mean, points.rows, points.dim).0
}

fn cmp(a: &(f32, u32), b: &(f32, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Best-first search from `start` with candidate bound `l`; returns every
/// expanded node with its distance to `target`.
fn greedy_search(points: &Points<'_>, graph: &[Vec<u32>], start: u32, target: u32, l: usize) -> Vec<(f32, u32)> {
    let q = points.row(target);
    let mut cand = vec![(l2_f32(q, points.row(start)), start)];
    let mut seen: HashSet<u32> = HashSet::from([start]);
    let mut expanded: HashSet<u32> = HashSet::new();
    let mut visited = Vec::new();
    while let Some(&(d, p)) = cand.iter().find(|c| !expanded.contains(&c.1)) {
        expanded.insert(p);
        visited.push((d, p));
        for &nb in &graph[p as usize] {
            if seen.insert(nb) {
                cand.push((l2_f32(q, points.row(nb)), nb));
            }
        }
        cand.sort_by(cmp);
        cand.truncate(l);
    }
    visited
}

/// Keeps up to `r` diverse neighbors: a candidate is dropped once some kept
/// neighbor `k` satisfies `alpha * d(k, c) <= d(p, c)` (compared squared).
fn robust_prune(points: &Points<'_>, p: u32, mut cand: Vec<(f32, u32)>, alpha: f32, r: usize) -> Vec<u32> {
    cand.retain(|c| c.1 != p);
    cand.sort_by(cmp);
    cand.dedup_by_key(|c| c.1);
    let a2 = alpha * alpha;
    let mut out = Vec::with_capacity(r);
    let mut alive = vec![true; cand.len()];
    for i in 0..cand.len() {
        if out.len() == r {
            break;
        }
        if !alive[i] {
            continue;
        }
        let (_, star) = cand[i];
        out.push(star);
        for j in i + 1..cand.len() {
            if alive[j] && a2 * points.dist(star, cand[j].1) <= cand[j].0 {
                alive[j] = false;
            }
        }
    }
    out
}

fn random_init(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| {
            let mut out = Vec::with_capacity(r);
            while out.len() < r {
                let j = rng.random_range(0..n) as u32;
                if j as usize != i && !out.contains(&j) {
                    out.push(j);
                }
            }
            out
        })
        .collect()
}

fn pass(exec: Exec, points: &Points<'_>, graph: &mut [Vec<u32>], entry: u32, order: &[u32], l: usize, r: usize, alpha: f32) {
    for batch in order.chunks(BUILD_BATCH) {
        let pruned = par::map_slice(exec, batch, |&p| {
            let mut cand = greedy_search(points, graph, entry, p, l);
            cand.extend(graph[p as usize].iter().map(|&nb| (points.dist(p, nb), nb)));
            robust_prune(points, p, cand, alpha, r)
        });
        let mut reverse: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&p, out) in batch.iter().zip(&pruned) {
            for &j in out {
                reverse.entry(j).or_default().push(p);
            }
        }
        for (&p, out) in batch.iter().zip(pruned) {
            graph[p as usize] = out;
        }
        let updates: Vec<(u32, Vec<u32>)> = reverse.into_iter().collect();
        let merged = par::map_slice(exec, &updates, |(j, incoming)| {
            let mut adj = graph[*j as usize].clone();
            for &p in incoming {
                if !adj.contains(&p) {
                    adj.push(p);
                }
            }
            if adj.len() > r {
                let cand = adj.iter().map(|&x| (points.dist(*j, x), x)).collect();
                adj = robust_prune(points, *j, cand, alpha, r);
            }
            adj
        });
        for ((j, _), adj) in updates.iter().zip(merged) {
            graph[*j as usize] = adj;
        }
    }
}

fn reachable_from(graph: &[Vec<u32>], start: u32, seen: &mut [bool]) {
    let mut queue = VecDeque::from([start]);
    seen[start as usize] = true;
    while let Some(p) = queue.pop_front() {
        for &nb in &graph[p as usize] {
            if !seen[nb as usize] {
                seen[nb as usize] = true;
                queue.push_back(nb);
            }
        }
    }
}

/// Links every node unreachable from `entry` to its nearest reachable node,
/// evicting that node's farthest edge when it is already at degree `r`.
fn fix_connectivity(points: &Points<'_>, graph: &mut [Vec<u32>], entry: u32, r: usize) -> usize {
    let n = graph.len();
    let mut added = 0;
    for _ in 0..n {
        let mut seen = vec![false; n];
        reachable_from(graph, entry, &mut seen);
        if seen.iter().all(|&s| s) {
            break;
        }
        for u in 0..n as u32 {
            if seen[u as usize] {
                continue;
            }
            let v = (0..n as u32)
                .filter(|&v| seen[v as usize])
                .map(|v| (points.dist(u, v), v))
                .min_by(cmp)
                .expect("entry is reachable")
                .1;
            let adj = &mut graph[v as usize];
            if adj.len() >= r {
                let worst = (0..adj.len())
                    .max_by(|&a, &b| cmp(&(points.dist(v, adj[a]), adj[a]), &(points.dist(v, adj[b]), adj[b])))
                    .expect("r >= 1");
                adj.swap_remove(worst);
            }
            adj.push(u);
            added += 1;
            reachable_from(graph, u, &mut seen);
        }
    }
    added
}

pub(crate) struct Built {
    pub adjacency: Vec<Vec<u32>>,
    pub entry: u32,
    pub fixup_edges: usize,
}

pub(crate) fn build(exec: Exec, points: &Points<'_>, r: usize, l: usize, alpha: f32, seed: u64) -> Built {
    let n = points.len();
    let entry = medoid(points);
    if n <= r + 1 {
        let adjacency = (0..n as u32)
            .map(|i| (0..n as u32).filter(|&j| j != i).collect())
            .collect();
        return Built {
            adjacency,
            entry,
            fixup_edges: 0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = random_init(n, r, &mut rng);
    let mut order: Vec<u32> = (0..n as u32).collect();
    for a in [1.0, alpha] {
        order.shuffle(&mut rng);
        pass(exec, points, &mut graph, entry, &order, l, r, a);
    }
    let fixup_edges = fix_connectivity(points, &mut graph, entry, r);
    Built {
        adjacency: graph,
        entry,
        fixup_edges,
    }
}
