//! Clustered index with boundary-vector replication.
//!
//! Vectors are partitioned around `n` centroids picked by k-means and snapped
//! to real data points. A vector is also copied into every other list whose
//! centroid lies within `(1 + epsilon)` of its nearest centroid distance, up
//! to `num_replica` lists. Each posting list is a separate storage object, so
//! a query's `nprobe` lists are fetched as independent, concurrent GETs in a
//! single roundtrip. Centroids and the tree over them stay in memory.

mod bkt;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub use bkt::{Bkt, BktChildren, BktNode, Selection};

use crate::cache::SegmentKey;
use crate::dataset::{self, dist, ElemType, VecFormat, VectorDataset, VectorRef};
use crate::kmeans;
use crate::par::{self, Exec};
use crate::search::{check_query, QueryVec, SearchOutput, SearchTask, SegmentFetch, Step, Work};
use crate::storage::{FileStore, MemoryStore, ReadRequest};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterBuildParams {
    /// Centroid count as a percentage of the dataset size.
    pub centroid_pct: f64,
    pub num_replica: usize,
    /// Closure threshold: replicate into lists within `(1 + epsilon)` of the
    /// nearest centroid distance.
    pub epsilon: f64,
    pub bkt_fanout: usize,
    pub bkt_leaf: usize,
    pub kmeans_iters: usize,
    /// Centroids scored by the tree per query, as a multiple of `nprobe`.
    pub bkt_check_factor: usize,
    pub seed: u64,
}

impl Default for ClusterBuildParams {
    fn default() -> Self {
        ClusterBuildParams {
            centroid_pct: 12.0,
            num_replica: 8,
            epsilon: 0.15,
            bkt_fanout: 8,
            bkt_leaf: 32,
            kmeans_iters: 10,
            bkt_check_factor: 16,
            seed: 0,
        }
    }
}

impl ClusterBuildParams {
    pub fn centroid_count(&self, n: usize) -> usize {
        (self.centroid_pct / 100.0 * n as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostingMeta {
    pub key: String,
    pub bytes: u64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    index_id: Arc<str>,
    params: ClusterBuildParams,
    vector_count: usize,
    centroids: VectorDataset,
    /// Dataset row each centroid was snapped to.
    centroid_ids: Vec<u32>,
    bkt: Bkt,
    postings: Vec<PostingMeta>,
}

/// A freshly built index plus the posting-list objects to upload.
#[derive(Debug, Clone)]
pub struct BuiltCluster {
    pub index: ClusterIndex,
    pub segments: Vec<(String, Bytes)>,
}

impl BuiltCluster {
    pub fn publish(&self, store: &MemoryStore) {
        for (k, v) in &self.segments {
            store.put(k.clone(), v.clone());
        }
    }
}

pub fn posting_list_bytes(count: usize, dim: usize, elem: ElemType) -> u64 {
    4 + count as u64 * (4 + (dim * elem.size()) as u64)
}

pub fn encode_posting_list(dataset: &VectorDataset, ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(posting_list_bytes(ids.len(), dataset.dim(), dataset.elem()) as usize);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for &id in ids {
        out.extend_from_slice(&id.to_le_bytes());
        dataset.row(id as usize).write_le(&mut out);
    }
    out
}

/// Iterates `(vector id, vector bytes)` records of a serialized posting list.
pub fn decode_posting_list(bytes: &[u8], row_bytes: usize) -> Result<impl Iterator<Item = (u32, &[u8])>> {
    if bytes.len() < 4 {
        return Err(Error::format("posting list", "missing count"));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let rec = 4 + row_bytes;
    if bytes.len() != 4 + count * rec {
        return Err(Error::format(
            "posting list",
            format!("length {} does not match {count} records", bytes.len()),
        ));
    }
    Ok(bytes[4..].chunks_exact(rec).map(|r| {
        (u32::from_le_bytes(r[..4].try_into().unwrap()), &r[4..])
    }))
}

fn snap_to_points(exec: Exec, rows: &[f32], dim: usize, centers: &[f32]) -> Vec<u32> {
    let n = centers.len() / dim;
    let nearest = par::map_range(exec, n, |c| {
        kmeans::nearest(&centers[c * dim..(c + 1) * dim], rows, dim).0
    });
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for (c, p) in nearest.into_iter().enumerate() {
        if used.insert(p) {
            out.push(p);
            continue;
        }
        // two centers snapped to the same point: take the nearest unused one
        let center = &centers[c * dim..(c + 1) * dim];
        let (best, _) = rows
            .chunks_exact(dim)
            .enumerate()
            .filter(|(i, _)| !used.contains(&(*i as u32)))
            .map(|(i, r)| (i as u32, crate::dataset::l2_f32(center, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("n <= N leaves an unused point");
        used.insert(best);
        out.push(best);
    }
    out
}

/// Lists a vector belongs to, nearest first: its closest centroid plus any
/// centroid within `(1 + epsilon)` of that distance, at most `num_replica`.
pub fn replica_assignment(
    vector: VectorRef<'_>,
    centroids: &VectorDataset,
    num_replica: usize,
    epsilon: f64,
) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = centroids
        .rows()
        .enumerate()
        .map(|(c, r)| (dist(vector, r), c as u32))
        .collect();
    let keep = num_replica.min(scored.len());
    dataset::top_k_sorted(&mut scored, keep);
    let limit = (1.0 + epsilon).powi(2) * scored[0].0;
    scored
        .iter()
        .take_while(|(d, _)| *d <= limit)
        .map(|&(_, c)| c)
        .collect()
}

pub fn build_cluster_index(dataset: &VectorDataset, params: &ClusterBuildParams, index_id: &str) -> Result<BuiltCluster> {
    build_cluster_index_with(Exec::default(), dataset, params, index_id)
}

pub fn build_cluster_index_with(
    exec: Exec,
    dataset: &VectorDataset,
    params: &ClusterBuildParams,
    index_id: &str,
) -> Result<BuiltCluster> {
    let count = dataset.count();
    if count == 0 {
        return Err(Error::invalid("cannot build an index over an empty dataset"));
    }
    if !(params.centroid_pct > 0.0 && params.centroid_pct < 100.0) {
        return Err(Error::invalid("centroid_pct must lie in (0, 100)"));
    }
    if params.num_replica == 0 || params.epsilon < 0.0 {
        return Err(Error::invalid("num_replica must be >= 1 and epsilon >= 0"));
    }
    let n = params.centroid_count(count);
    if n == 0 || n > count {
        return Err(Error::invalid(format!(
            "centroid count {n} must lie in 1..={count}"
        )));
    }
    let dim = dataset.dim();
    let rows = dataset.to_f32_matrix();
    let centers = kmeans::kmeans(exec, &rows, dim, n, params.kmeans_iters, params.seed);
    let centroid_ids = snap_to_points(exec, &rows, dim, &centers);
    let picked: Vec<usize> = centroid_ids.iter().map(|&i| i as usize).collect();
    let centroids = dataset.select(&picked);

    let assignments = par::map_range(exec, count, |v| {
        replica_assignment(dataset.row(v), &centroids, params.num_replica, params.epsilon)
    });
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (v, lists_of_v) in assignments.iter().enumerate() {
        for &c in lists_of_v {
            lists[c as usize].push(v as u32);
        }
    }

    let index_id: Arc<str> = Arc::from(index_id);
    let encoded = par::map_slice(exec, &lists, |ids| Bytes::from(encode_posting_list(dataset, ids)));
    let mut postings = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    for (i, (ids, bytes)) in lists.iter().zip(encoded).enumerate() {
        let key = format!("{index_id}/pl/{i}");
        postings.push(PostingMeta {
            key: key.clone(),
            bytes: bytes.len() as u64,
            count: ids.len() as u32,
        });
        segments.push((key, bytes));
    }
    let bkt = Bkt::build(
        exec,
        &centroids,
        params.bkt_fanout,
        params.bkt_leaf,
        params.kmeans_iters,
        params.seed ^ 0x9e37_79b9,
    );
    Ok(BuiltCluster {
        index: ClusterIndex {
            index_id,
            params: params.clone(),
            vector_count: count,
            centroids,
            centroid_ids,
            bkt,
            postings,
        },
        segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndexStats {
    pub lists: usize,
    pub mean_list_bytes: f64,
    pub max_list_bytes: u64,
    pub total_bytes: u64,
    /// Stored vector copies per dataset vector.
    pub replication_ratio: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterManifest {
    kind: String,
    index_id: String,
    dim: usize,
    elem: ElemType,
    vector_count: usize,
    params: ClusterBuildParams,
    centroid_ids: Vec<u32>,
    postings: Vec<PostingMeta>,
}

impl ClusterIndex {
    pub fn index_id(&self) -> &str {
        &self.index_id
    }

    pub fn params(&self) -> &ClusterBuildParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn elem(&self) -> ElemType {
        self.centroids.elem()
    }

    pub fn vector_count(&self) -> usize {
        self.vector_count
    }

    pub fn list_count(&self) -> usize {
        self.postings.len()
    }

    pub fn centroids(&self) -> &VectorDataset {
        &self.centroids
    }

    pub fn centroid_ids(&self) -> &[u32] {
        &self.centroid_ids
    }

    pub fn bkt(&self) -> &Bkt {
        &self.bkt
    }

    pub fn postings(&self) -> &[PostingMeta] {
        &self.postings
    }

    /// The `nprobe` posting lists a query should visit, nearest first.
    pub fn bkt_select(&self, query: VectorRef<'_>, nprobe: usize) -> Result<Selection> {
        check_query(query, self.dim(), self.elem())?;
        if nprobe == 0 || nprobe > self.list_count() {
            return Err(Error::invalid(format!(
                "nprobe={nprobe} must lie in 1..={}",
                self.list_count()
            )));
        }
        let budget = nprobe.saturating_mul(self.params.bkt_check_factor.max(1));
        Ok(self.bkt.select(&self.centroids, query, nprobe, budget))
    }

    pub fn search_task(&self, query: QueryVec, nprobe: usize, k: usize) -> Result<ClusterSearch<'_>> {
        check_query(query.as_ref(), self.dim(), self.elem())?;
        if nprobe == 0 || nprobe > self.list_count() {
            return Err(Error::invalid(format!(
                "nprobe={nprobe} must lie in 1..={}",
                self.list_count()
            )));
        }
        if k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        Ok(ClusterSearch {
            index: self,
            query,
            nprobe,
            k,
            selected: 0,
        })
    }

    pub fn fetch_for(&self, list: u32) -> SegmentFetch {
        let meta = &self.postings[list as usize];
        SegmentFetch {
            key: SegmentKey::new(self.index_id.clone(), list as u64),
            request: ReadRequest::new(meta.key.clone(), 0, meta.bytes),
        }
    }

    pub fn stats(&self) -> ClusterIndexStats {
        let total: u64 = self.postings.iter().map(|p| p.bytes).sum();
        let copies: u64 = self.postings.iter().map(|p| p.count as u64).sum();
        ClusterIndexStats {
            lists: self.postings.len(),
            mean_list_bytes: total as f64 / self.postings.len().max(1) as f64,
            max_list_bytes: self.postings.iter().map(|p| p.bytes).max().unwrap_or(0),
            total_bytes: total,
            replication_ratio: copies as f64 / self.vector_count.max(1) as f64,
        }
    }

    /// Writes manifest and in-memory metadata under `<root>/<index_id>/`.
    /// Posting lists are written separately through [`FileStore`].
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&*self.index_id);
        fs::create_dir_all(dir.join("meta"))?;
        let manifest = ClusterManifest {
            kind: "cluster".into(),
            index_id: self.index_id.to_string(),
            dim: self.dim(),
            elem: self.elem(),
            vector_count: self.vector_count,
            params: self.params.clone(),
            centroid_ids: self.centroid_ids.clone(),
            postings: self.postings.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        let fmt = match self.elem() {
            ElemType::F32 => VecFormat::Fbin,
            ElemType::I8 => VecFormat::I8bin,
        };
        dataset::write_vectors(&self.centroids, dir.join("meta/centroids.bin"), fmt)?;
        fs::write(dir.join("meta/bkt.json"), serde_json::to_vec(&self.bkt)?)?;
        Ok(())
    }

    pub fn load(root: &Path, index_id: &str) -> Result<Self> {
        let dir = root.join(index_id);
        let manifest: ClusterManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.kind != "cluster" {
            return Err(Error::invalid(format!("{index_id} is not a cluster index")));
        }
        let fmt = match manifest.elem {
            ElemType::F32 => VecFormat::Fbin,
            ElemType::I8 => VecFormat::I8bin,
        };
        let centroids = dataset::load_vectors(dir.join("meta/centroids.bin"), fmt)?;
        let bkt: Bkt = serde_json::from_slice(&fs::read(dir.join("meta/bkt.json"))?)?;
        Ok(ClusterIndex {
            index_id: Arc::from(manifest.index_id.as_str()),
            params: manifest.params,
            vector_count: manifest.vector_count,
            centroids,
            centroid_ids: manifest.centroid_ids,
            bkt,
            postings: manifest.postings,
        })
    }
}

impl BuiltCluster {
    /// Saves metadata and uploads every posting list under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        self.index.save(root)?;
        let files = FileStore::new(root);
        for (k, v) in &self.segments {
            files.put(k, v)?;
        }
        Ok(())
    }
}

/// Search state machine: select lists in memory, fetch them all in one
/// wave, then score the deduplicated union exactly.
pub struct ClusterSearch<'a> {
    index: &'a ClusterIndex,
    query: QueryVec,
    nprobe: usize,
    k: usize,
    selected: u32,
}

impl SearchTask for ClusterSearch<'_> {
    fn start(&mut self) -> Result<(Step, Work)> {
        let sel = self.index.bkt_select(self.query.as_ref(), self.nprobe)?;
        self.selected = sel.ids.len() as u32;
        let fetches = sel.ids.iter().map(|&c| self.index.fetch_for(c)).collect();
        let work = Work {
            centroid_units: sel.evaluations * self.index.dim() as u64,
            ..Work::default()
        };
        Ok((Step::Fetch(fetches), work))
    }

    fn resume(&mut self, segments: Vec<Bytes>) -> Result<(Step, Work)> {
        let row_bytes = self.index.dim() * self.index.elem().size();
        let query = self.query.as_ref();
        let mut seen = HashSet::new();
        let mut scored = Vec::new();
        for seg in &segments {
            for (id, vec) in decode_posting_list(seg, row_bytes)? {
                if seen.insert(id) {
                    scored.push((query.squared_l2_le(vec), id));
                }
            }
        }
        let vectors_scored = scored.len() as u64;
        dataset::top_k_sorted(&mut scored, self.k);
        let out = SearchOutput {
            ids: scored.iter().map(|s| s.1).collect(),
            dists: scored.iter().map(|s| s.0).collect(),
            posting_lists_visited: self.selected,
            expansions: 0,
            vectors_scored,
        };
        let work = Work {
            dist_units: vectors_scored * self.index.dim() as u64,
            ..Work::default()
        };
        Ok((Step::Done(out), work))
    }
}
