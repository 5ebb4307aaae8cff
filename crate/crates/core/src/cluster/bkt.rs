//! Balanced k-means tree over the centroid set.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::dataset::{dist, l2_f32, VectorDataset, VectorRef};
use crate::kmeans;
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BktChildren {
    Inner(Vec<u32>),
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktNode {
    pub center: Vec<f32>,
    pub children: BktChildren,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bkt {
    pub nodes: Vec<BktNode>,
    pub root: u32,
    pub fanout: usize,
    pub leaf_size: usize,
}

/// Centroids chosen by [`Bkt::select`] plus the distance evaluations spent.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<u32>,
    pub dists: Vec<f64>,
    pub evaluations: u64,
}

fn mean(rows: &[f32], dim: usize, members: &[u32]) -> Vec<f32> {
    let mut acc = vec![0f64; dim];
    for &m in members {
        for (a, &x) in acc.iter_mut().zip(&rows[m as usize * dim..(m as usize + 1) * dim]) {
            *a += x as f64;
        }
    }
    acc.into_iter()
        .map(|x| (x / members.len().max(1) as f64) as f32)
        .collect()
}

impl Bkt {
    pub fn build(exec: Exec, centroids: &VectorDataset, fanout: usize, leaf_size: usize, iters: usize, seed: u64) -> Bkt {
        let fanout = fanout.max(2);
        let leaf_size = leaf_size.max(1);
        let dim = centroids.dim();
        let rows = centroids.to_f32_matrix();
        let mut tree = Bkt {
            nodes: Vec::new(),
            root: 0,
            fanout,
            leaf_size,
        };
        let all: Vec<u32> = (0..centroids.count() as u32).collect();
        tree.root = tree.build_node(exec, &rows, dim, all, iters, seed);
        tree
    }

    fn build_node(&mut self, exec: Exec, rows: &[f32], dim: usize, members: Vec<u32>, iters: usize, seed: u64) -> u32 {
        let center = mean(rows, dim, &members);
        if members.len() <= self.leaf_size {
            self.nodes.push(BktNode {
                center,
                children: BktChildren::Leaf(members),
            });
            return (self.nodes.len() - 1) as u32;
        }
        let k = self.fanout.min(members.len());
        let sub: Vec<f32> = members
            .iter()
            .flat_map(|&m| rows[m as usize * dim..(m as usize + 1) * dim].iter().copied())
            .collect();
        let node_seed = seed.wrapping_mul(6364136223846793005).wrapping_add(self.nodes.len() as u64 + 1);
        let centers = kmeans::kmeans(exec, &sub, dim, k, iters, node_seed);
        let labels = kmeans::assign(exec, &sub, dim, &centers);
        let mut groups: Vec<Vec<u32>> = vec![Vec::new(); k];
        for (&m, &(c, _)) in members.iter().zip(&labels) {
            groups[c as usize].push(m);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < 2 {
            // coincident points: split evenly in id order
            let chunk = members.len().div_ceil(k);
            groups = members.chunks(chunk).map(|c| c.to_vec()).collect();
        }
        let idx = self.nodes.len();
        self.nodes.push(BktNode {
            center,
            children: BktChildren::Inner(Vec::new()),
        });
        let children: Vec<u32> = groups
            .into_iter()
            .map(|g| self.build_node(exec, rows, dim, g, iters, seed))
            .collect();
        self.nodes[idx].children = BktChildren::Inner(children);
        idx as u32
    }

    /// Best-first descent ordered by distance to node centers. Leaves are
    /// scored exactly until at least `budget` centroids are scored (or the
    /// tree is exhausted); the `nprobe` closest scored centroids are
    /// returned ascending by `(distance, id)`.
    pub fn select(&self, centroids: &VectorDataset, query: VectorRef<'_>, nprobe: usize, budget: usize) -> Selection {
        let qf = query.to_f32();
        let budget = budget.max(nprobe);
        let mut heap = BinaryHeap::new();
        let root = &self.nodes[self.root as usize];
        heap.push(Reverse((OrderedFloat(l2_f32(&qf, &root.center)), self.root)));
        let mut evaluations = 1u64;
        let mut scored: Vec<(f64, u32)> = Vec::new();
        while let Some(Reverse((_, n))) = heap.pop() {
            if scored.len() >= budget {
                break;
            }
            match &self.nodes[n as usize].children {
                BktChildren::Leaf(members) => {
                    for &c in members {
                        scored.push((dist(query, centroids.row(c as usize)), c));
                    }
                    evaluations += members.len() as u64;
                }
                BktChildren::Inner(children) => {
                    for &c in children {
                        let d = l2_f32(&qf, &self.nodes[c as usize].center);
                        heap.push(Reverse((OrderedFloat(d), c)));
                    }
                    evaluations += children.len() as u64;
                }
            }
        }
        crate::dataset::top_k_sorted(&mut scored, nprobe);
        Selection {
            ids: scored.iter().map(|s| s.1).collect(),
            dists: scored.iter().map(|s| s.0).collect(),
            evaluations,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Bkt, n: u32) -> usize {
            match &t.nodes[n as usize].children {
                BktChildren::Leaf(_) => 1,
                BktChildren::Inner(c) => 1 + c.iter().map(|&x| go(t, x)).max().unwrap_or(0),
            }
        }
        go(self, self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::brute_force_topk;
    use crate::synthetic::GaussianMixture;

    #[test]
    fn single_leaf_is_flat_scan() {
        let c = GaussianMixture::new(8, 4, 1.0, 1).sample(20, 2);
        let t = Bkt::build(Exec::default(), &c, 8, 32, 5, 0);
        assert_eq!(t.nodes.len(), 1);
        let q = GaussianMixture::new(8, 4, 1.0, 1).sample(5, 3);
        let gt = brute_force_topk(&c, &q, 6).unwrap();
        for i in 0..q.count() {
            let s = t.select(&c, q.row(i), 6, 6);
            assert_eq!(s.ids, gt.ids(i));
        }
    }

    #[test]
    fn exhaustive_nprobe_matches_brute_force_order() {
        let c = GaussianMixture::new(8, 10, 0.5, 4).sample(300, 5);
        let t = Bkt::build(Exec::default(), &c, 4, 16, 5, 0);
        assert!(t.depth() > 1);
        let q = GaussianMixture::new(8, 10, 0.5, 4).sample(3, 6);
        let gt = brute_force_topk(&c, &q, 300).unwrap();
        for i in 0..q.count() {
            let s = t.select(&c, q.row(i), 300, 300);
            assert_eq!(s.ids, gt.ids(i));
        }
    }

    #[test]
    fn every_centroid_in_exactly_one_leaf() {
        let c = GaussianMixture::new(4, 3, 0.2, 9).sample(500, 1);
        let t = Bkt::build(Exec::default(), &c, 8, 32, 5, 3);
        let mut seen = vec![0u32; 500];
        for n in &t.nodes {
            if let BktChildren::Leaf(m) = &n.children {
                for &x in m {
                    seen[x as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }
}
