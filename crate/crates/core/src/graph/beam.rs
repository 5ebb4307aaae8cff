//! Beam search: each round expands up to `W` of the closest unvisited
//! candidates, fetching their sectors as one batch.

use std::collections::HashSet;

use bytes::Bytes;

use super::{decode_record, GraphIndex, PqTable};
use crate::dataset;
use crate::search::{QueryVec, SearchOutput, SearchTask, Step, Work};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Candidate {
    pq: f32,
    id: u32,
    visited: bool,
}

pub struct BeamSearch<'a> {
    index: &'a GraphIndex,
    query: QueryVec,
    search_len: usize,
    beam_width: usize,
    k: usize,
    table: Option<PqTable>,
    cand: Vec<Candidate>,
    seen: HashSet<u32>,
    rerank: Vec<(f64, u32)>,
    /// Nodes being expanded this round with the index of their fetch unit.
    pending: Vec<(u32, usize)>,
    expansions: u32,
}

impl<'a> BeamSearch<'a> {
    pub(super) fn new(index: &'a GraphIndex, query: QueryVec, search_len: usize, beam_width: usize, k: usize) -> Self {
        BeamSearch {
            index,
            query,
            search_len,
            beam_width,
            k,
            table: None,
            cand: Vec::new(),
            seen: HashSet::new(),
            rerank: Vec::new(),
            pending: Vec::new(),
            expansions: 0,
        }
    }

    fn pq(&self, node: u32) -> f32 {
        super::pq_distance(self.table.as_ref().expect("table built in start"), self.index.code(node))
    }

    fn insert(&mut self, node: u32) {
        let c = Candidate {
            pq: self.pq(node),
            id: node,
            visited: false,
        };
        let pos = self
            .cand
            .partition_point(|x| x.pq.total_cmp(&c.pq).then(x.id.cmp(&c.id)).is_lt());
        self.cand.insert(pos, c);
    }

    fn next_round(&mut self) -> Step {
        self.pending.clear();
        let mut units: Vec<u64> = Vec::new();
        let layout = *self.index.layout();
        for c in self.cand.iter_mut().filter(|c| !c.visited).take(self.beam_width) {
            c.visited = true;
            let unit = layout.unit_of(c.id);
            let slot = match units.iter().position(|&u| u == unit) {
                Some(s) => s,
                None => {
                    units.push(unit);
                    units.len() - 1
                }
            };
            self.pending.push((c.id, slot));
        }
        if self.pending.is_empty() {
            let mut pool = std::mem::take(&mut self.rerank);
            let scored = pool.len() as u64;
            dataset::top_k_sorted(&mut pool, self.k);
            return Step::Done(SearchOutput {
                ids: pool.iter().map(|p| p.1).collect(),
                dists: pool.iter().map(|p| p.0).collect(),
                posting_lists_visited: 0,
                expansions: self.expansions,
                vectors_scored: scored,
            });
        }
        Step::Fetch(units.into_iter().map(|u| self.index.fetch_for_unit(u)).collect())
    }
}

impl SearchTask for BeamSearch<'_> {
    fn start(&mut self) -> Result<(Step, Work)> {
        let qf = self.query.to_f32();
        self.table = Some(self.index.codebook().lookup_table(&qf));
        let entry = self.index.entry_point();
        self.seen.insert(entry);
        self.insert(entry);
        let work = Work {
            centroid_units: (super::pq::PQ_CENTERS * self.index.dim()) as u64,
            dist_units: self.index.codebook().chunks() as u64,
        };
        Ok((self.next_round(), work))
    }

    fn resume(&mut self, segments: Vec<Bytes>) -> Result<(Step, Work)> {
        let layout = *self.index.layout();
        let row_bytes = self.index.dim() * self.index.elem().size();
        let chunks = self.index.codebook().chunks() as u64;
        let mut work = Work::default();
        let pending = std::mem::take(&mut self.pending);
        for &(node, slot) in &pending {
            let unit = segments
                .get(slot)
                .ok_or_else(|| Error::invalid("fewer segments than fetched units"))?;
            let start = layout.offset_in_unit(node);
            let record = unit
                .get(start..start + layout.record_bytes)
                .ok_or_else(|| Error::format("graph sector", "record outside fetched unit"))?;
            let (vec, nbrs) = decode_record(record, row_bytes)?;
            self.rerank.push((self.query.as_ref().squared_l2_le(vec), node));
            work.dist_units += self.index.dim() as u64;
            self.expansions += 1;
            for nb in nbrs {
                if (nb as usize) >= self.index.node_count() {
                    return Err(Error::format("graph record", format!("neighbor {nb} out of range")));
                }
                if self.seen.insert(nb) {
                    self.insert(nb);
                    work.dist_units += chunks;
                }
            }
        }
        self.cand.truncate(self.search_len);
        Ok((self.next_round(), work))
    }
}
