//! Sector-packed proximity graph searched with a PQ-guided beam.
//!
//! Full vectors and adjacency lists live in one storage object of
//! fixed-size sectors; the PQ codebook and per-node codes stay in memory to
//! order candidates between fetch rounds.

mod beam;
pub mod pq;
mod vamana;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub use beam::BeamSearch;
pub use pq::{pq_distance, train_pq, PqCodebook, PqTable};
pub use vamana::BUILD_BATCH;

use crate::cache::SegmentKey;
use crate::dataset::{ElemType, VectorDataset};
use crate::par::Exec;
use crate::search::{check_query, QueryVec, SegmentFetch};
use crate::storage::{FileStore, MemoryStore, ReadRequest};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphBuildParams {
    /// Maximum out-degree.
    pub r: usize,
    pub l_build: usize,
    pub alpha: f32,
    pub sector_len: usize,
    /// PQ chunk count; `None` picks `max(dim / 8, 48)` clamped to `dim`.
    pub pq_chunks: Option<usize>,
    pub seed: u64,
}

impl Default for GraphBuildParams {
    fn default() -> Self {
        GraphBuildParams {
            r: 64,
            l_build: 128,
            alpha: 1.2,
            sector_len: 4096,
            pq_chunks: None,
            seed: 0,
        }
    }
}

impl GraphBuildParams {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.l_build < self.r {
            return Err(Error::invalid("graph params need r >= 1 and l_build >= r"));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::invalid("alpha must be >= 1"));
        }
        if self.sector_len == 0 {
            return Err(Error::invalid("sector_len must be positive"));
        }
        Ok(())
    }
}

/// Placement of fixed-size node records in sectors. Records never straddle
/// a fetch unit: small records are packed whole into one sector, large ones
/// occupy a run of whole sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectorLayout {
    pub record_bytes: usize,
    pub sector_len: usize,
    /// Records per sector, or 1 when a record spans several sectors.
    pub nodes_per_sector: usize,
    pub sectors_per_node: usize,
}

impl SectorLayout {
    pub fn new(dim: usize, elem: ElemType, r: usize, sector_len: usize) -> Result<Self> {
        if sector_len == 0 {
            return Err(Error::invalid("sector_len must be positive"));
        }
        let record_bytes = dim * elem.size() + 4 + 4 * r;
        Ok(if record_bytes <= sector_len {
            SectorLayout {
                record_bytes,
                sector_len,
                nodes_per_sector: sector_len / record_bytes,
                sectors_per_node: 1,
            }
        } else {
            SectorLayout {
                record_bytes,
                sector_len,
                nodes_per_sector: 1,
                sectors_per_node: record_bytes.div_ceil(sector_len),
            }
        })
    }

    /// Bytes fetched per request.
    pub fn unit_bytes(&self) -> usize {
        self.sector_len * self.sectors_per_node
    }

    pub fn unit_of(&self, node: u32) -> u64 {
        node as u64 / self.nodes_per_sector as u64
    }

    pub fn unit_count(&self, nodes: usize) -> u64 {
        nodes.div_ceil(self.nodes_per_sector) as u64
    }

    pub fn offset_in_unit(&self, node: u32) -> usize {
        (node as usize % self.nodes_per_sector) * self.record_bytes
    }

    pub fn unit_range(&self, unit: u64) -> (u64, u64) {
        let len = self.unit_bytes() as u64;
        (unit * len, len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphIndexStats {
    pub total_bytes: u64,
    pub record_bytes: usize,
    pub unit_bytes: usize,
    pub nodes_per_sector: usize,
    pub sectors_per_node: usize,
    /// `degree_histogram[d]` = nodes with out-degree `d`.
    pub degree_histogram: Vec<u64>,
    pub max_degree: usize,
    pub mean_degree: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    index_id: Arc<str>,
    params: GraphBuildParams,
    node_count: usize,
    dim: usize,
    elem: ElemType,
    layout: SectorLayout,
    entry: u32,
    codebook: PqCodebook,
    codes: Vec<u8>,
    degree_histogram: Vec<u64>,
    fixup_edges: usize,
}

#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub index: GraphIndex,
    pub data: Bytes,
    /// Adjacency lists as built (also serialized inside `data`).
    pub adjacency: Vec<Vec<u32>>,
}

impl BuiltGraph {
    pub fn publish(&self, store: &MemoryStore) {
        store.put(self.index.data_key(), self.data.clone());
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.index.save(root)?;
        FileStore::new(root).put(&self.index.data_key(), &self.data)
    }
}

pub fn build_graph_index(dataset: &VectorDataset, params: &GraphBuildParams, index_id: &str) -> Result<BuiltGraph> {
    build_graph_index_with(Exec::default(), dataset, params, index_id)
}

pub fn build_graph_index_with(
    exec: Exec,
    dataset: &VectorDataset,
    params: &GraphBuildParams,
    index_id: &str,
) -> Result<BuiltGraph> {
    params.validate()?;
    let n = dataset.count();
    if n == 0 {
        return Err(Error::invalid("cannot build an index over an empty dataset"));
    }
    if n >= 1 << 31 {
        return Err(Error::invalid("graph node count must stay below 2^31"));
    }
    let dim = dataset.dim();
    let chunks = params.pq_chunks.unwrap_or_else(|| pq::default_chunks(dim));
    let layout = SectorLayout::new(dim, dataset.elem(), params.r, params.sector_len)?;
    let (codebook, codes) = train_pq(exec, dataset, chunks, params.seed)?;

    let rows = dataset.to_f32_matrix();
    let points = vamana::Points { rows: &rows, dim };
    let built = vamana::build(exec, &points, params.r, params.l_build, params.alpha, params.seed);

    let mut data = vec![0u8; (layout.unit_count(n) * layout.unit_bytes() as u64) as usize];
    let mut record = Vec::with_capacity(layout.record_bytes);
    let mut degree_histogram = vec![0u64; params.r + 1];
    for (i, adj) in built.adjacency.iter().enumerate() {
        record.clear();
        dataset.row(i).write_le(&mut record);
        record.extend_from_slice(&(adj.len() as u32).to_le_bytes());
        for &nb in adj {
            record.extend_from_slice(&nb.to_le_bytes());
        }
        record.resize(layout.record_bytes, 0);
        let node = i as u32;
        let start = layout.unit_range(layout.unit_of(node)).0 as usize + layout.offset_in_unit(node);
        data[start..start + layout.record_bytes].copy_from_slice(&record);
        degree_histogram[adj.len()] += 1;
    }
    Ok(BuiltGraph {
        index: GraphIndex {
            index_id: Arc::from(index_id),
            params: params.clone(),
            node_count: n,
            dim,
            elem: dataset.elem(),
            layout,
            entry: built.entry,
            codebook,
            codes,
            degree_histogram,
            fixup_edges: built.fixup_edges,
        },
        data: Bytes::from(data),
        adjacency: built.adjacency,
    })
}

/// Decodes one node record: `(vector bytes, neighbor ids)`.
pub fn decode_record(record: &[u8], row_bytes: usize) -> Result<(&[u8], Vec<u32>)> {
    if record.len() < row_bytes + 4 {
        return Err(Error::format("graph record", "record too short"));
    }
    let count = u32::from_le_bytes(record[row_bytes..row_bytes + 4].try_into().unwrap()) as usize;
    let ids = &record[row_bytes + 4..];
    if ids.len() < 4 * count {
        return Err(Error::format("graph record", format!("{count} neighbors overflow the record")));
    }
    let nbrs = ids[..4 * count]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((&record[..row_bytes], nbrs))
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphManifest {
    kind: String,
    index_id: String,
    dim: usize,
    elem: ElemType,
    node_count: usize,
    params: GraphBuildParams,
    layout: SectorLayout,
    entry_point: u32,
    data_key: String,
    degree_histogram: Vec<u64>,
    fixup_edges: usize,
}

impl GraphIndex {
    pub fn index_id(&self) -> &str {
        &self.index_id
    }

    pub fn params(&self) -> &GraphBuildParams {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elem(&self) -> ElemType {
        self.elem
    }

    pub fn layout(&self) -> &SectorLayout {
        &self.layout
    }

    pub fn entry_point(&self) -> u32 {
        self.entry
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn code(&self, node: u32) -> &[u8] {
        let c = self.codebook.chunks();
        &self.codes[node as usize * c..(node as usize + 1) * c]
    }

    pub fn fixup_edges(&self) -> usize {
        self.fixup_edges
    }

    pub fn data_key(&self) -> String {
        format!("{}/graph.dat", self.index_id)
    }

    pub fn fetch_for_unit(&self, unit: u64) -> SegmentFetch {
        let (offset, length) = self.layout.unit_range(unit);
        SegmentFetch {
            key: SegmentKey::new(self.index_id.clone(), unit),
            request: ReadRequest::new(self.data_key(), offset, length),
        }
    }

    pub fn search_task(&self, query: QueryVec, search_len: usize, beam_width: usize, k: usize) -> Result<BeamSearch<'_>> {
        check_query(query.as_ref(), self.dim, self.elem)?;
        if k == 0 || search_len < k {
            return Err(Error::invalid(format!(
                "need 1 <= k <= search_len, got k={k} search_len={search_len}"
            )));
        }
        if beam_width == 0 {
            return Err(Error::invalid("beam width must be >= 1"));
        }
        Ok(BeamSearch::new(self, query, search_len, beam_width, k))
    }

    pub fn stats(&self) -> GraphIndexStats {
        let nodes: u64 = self.degree_histogram.iter().sum();
        let edges: u64 = self
            .degree_histogram
            .iter()
            .enumerate()
            .map(|(d, &c)| d as u64 * c)
            .sum();
        GraphIndexStats {
            total_bytes: self.layout.unit_count(self.node_count) * self.layout.unit_bytes() as u64,
            record_bytes: self.layout.record_bytes,
            unit_bytes: self.layout.unit_bytes(),
            nodes_per_sector: self.layout.nodes_per_sector,
            sectors_per_node: self.layout.sectors_per_node,
            degree_histogram: self.degree_histogram.clone(),
            max_degree: self.degree_histogram.iter().rposition(|&c| c > 0).unwrap_or(0),
            mean_degree: edges as f64 / nodes.max(1) as f64,
        }
    }

    /// Writes the manifest and in-memory PQ data under `<root>/<index_id>/`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&*self.index_id);
        fs::create_dir_all(dir.join("meta"))?;
        let manifest = GraphManifest {
            kind: "graph".into(),
            index_id: self.index_id.to_string(),
            dim: self.dim,
            elem: self.elem,
            node_count: self.node_count,
            params: self.params.clone(),
            layout: self.layout,
            entry_point: self.entry,
            data_key: self.data_key(),
            degree_histogram: self.degree_histogram.clone(),
            fixup_edges: self.fixup_edges,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("meta/pq.json"), serde_json::to_vec(&self.codebook)?)?;
        fs::write(dir.join("meta/codes.bin"), &self.codes)?;
        Ok(())
    }

    pub fn load(root: &Path, index_id: &str) -> Result<Self> {
        let dir = root.join(index_id);
        let m: GraphManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.kind != "graph" {
            return Err(Error::invalid(format!("{index_id} is not a graph index")));
        }
        let codebook: PqCodebook = serde_json::from_slice(&fs::read(dir.join("meta/pq.json"))?)?;
        let codes = fs::read(dir.join("meta/codes.bin"))?;
        if codes.len() != m.node_count * codebook.chunks() {
            return Err(Error::format("pq codes", "length does not match node count"));
        }
        Ok(GraphIndex {
            index_id: Arc::from(m.index_id.as_str()),
            params: m.params,
            node_count: m.node_count,
            dim: m.dim,
            elem: m.elem,
            layout: m.layout,
            entry: m.entry_point,
            codebook,
            codes,
            degree_histogram: m.degree_histogram,
            fixup_edges: m.fixup_edges,
        })
    }
}
