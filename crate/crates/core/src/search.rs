//! Resumable search tasks and their per-query accounting.
//!
//! An index search is written as a [`SearchTask`]: a state machine that
//! alternates between compute steps and fetch rounds. Each [`Step::Fetch`]
//! names the segments of one roundtrip; the executor resolves them through
//! the cache and storage and resumes the task with their bytes in order.
//! Keeping the search independent of how I/O is performed lets the same
//! code run synchronously, under many concurrent virtual-time queries, or
//! on wall-clock worker threads.

use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::cache::{SegmentCache, SegmentKey};
use crate::dataset::{ElemType, VectorRef};
use crate::storage::{ClockMode, ObjectStore, ReadRequest, ReadStats};
use crate::{Error, Result};

/// An owned query vector.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryVec {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl QueryVec {
    pub fn as_ref(&self) -> VectorRef<'_> {
        match self {
            QueryVec::F32(v) => VectorRef::F32(v),
            QueryVec::I8(v) => VectorRef::I8(v),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.as_ref().to_f32()
    }
}

impl From<VectorRef<'_>> for QueryVec {
    fn from(v: VectorRef<'_>) -> Self {
        match v {
            VectorRef::F32(x) => QueryVec::F32(x.to_vec()),
            VectorRef::I8(x) => QueryVec::I8(x.to_vec()),
        }
    }
}

pub(crate) fn check_query(query: VectorRef<'_>, dim: usize, elem: ElemType) -> Result<()> {
    if query.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: query.dim(),
        });
    }
    if query.elem() != elem {
        return Err(Error::ElemMismatch(format!(
            "index holds {elem}, query is {}",
            query.elem()
        )));
    }
    Ok(())
}

/// One fetchable unit: its cache identity and the storage read behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentFetch {
    pub key: SegmentKey,
    pub request: ReadRequest,
}

/// Compute performed by a step, in dimension-weighted units: scoring one
/// `d`-dimensional distance costs `d` units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub dist_units: u64,
    pub centroid_units: u64,
}

impl Work {
    pub fn add(&mut self, other: Work) {
        self.dist_units += other.dist_units;
        self.centroid_units += other.centroid_units;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchOutput {
    pub ids: Vec<u32>,
    pub dists: Vec<f64>,
    pub posting_lists_visited: u32,
    pub expansions: u32,
    pub vectors_scored: u64,
}

#[derive(Debug)]
pub enum Step {
    Fetch(Vec<SegmentFetch>),
    Done(SearchOutput),
}

pub trait SearchTask: Send {
    fn start(&mut self) -> Result<(Step, Work)>;

    /// Continues after a fetch round; `segments` follow the fetch order.
    fn resume(&mut self, segments: Vec<Bytes>) -> Result<(Step, Work)>;
}

/// How compute time is charged to a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComputeModel {
    /// Deterministic charge per unit of [`Work`].
    Modeled {
        sec_per_dist_unit: f64,
        sec_per_centroid_unit: f64,
    },
    /// Real elapsed time of each compute step.
    Measured,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel::Modeled {
            sec_per_dist_unit: 0.5e-9,
            sec_per_centroid_unit: 0.5e-9,
        }
    }
}

impl ComputeModel {
    pub fn charge(&self, work: Work, measured: Duration) -> Duration {
        match *self {
            ComputeModel::Modeled {
                sec_per_dist_unit,
                sec_per_centroid_unit,
            } => Duration::from_secs_f64(
                work.dist_units as f64 * sec_per_dist_unit
                    + work.centroid_units as f64 * sec_per_centroid_unit,
            ),
            ComputeModel::Measured => measured,
        }
    }
}

/// Cache outcome of one fetch round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStats {
    pub units: u32,
    pub hits: u32,
}

impl RoundStats {
    /// A round served entirely from cache saves its roundtrip.
    pub fn fully_cached(&self) -> bool {
        self.hits == self.units
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub latency: Duration,
    /// Fetch rounds that went to storage.
    pub roundtrips: u32,
    pub requests: u64,
    /// Bytes fetched from storage (cache hits excluded).
    pub bytes_read: u64,
    pub posting_lists_visited: u32,
    pub expansions: u32,
    pub vectors_scored: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub rounds: Vec<RoundStats>,
    pub io_wait: Duration,
    pub queue_wait: Duration,
    pub compute: Duration,
    pub work: Work,
}

impl QueryStats {
    pub fn round_hit_flags(&self) -> Vec<bool> {
        self.rounds.iter().map(RoundStats::fully_cached).collect()
    }

    pub(crate) fn absorb_output(&mut self, out: &SearchOutput) {
        self.posting_lists_visited = out.posting_lists_visited;
        self.expansions = out.expansions;
        self.vectors_scored = out.vectors_scored;
    }
}

/// Splits a fetch round into cache hits and the misses to request.
pub(crate) struct RoundPlan {
    pub parts: Vec<Option<Bytes>>,
    pub misses: Vec<usize>,
}

pub(crate) fn plan_round(cache: &SegmentCache, fetches: &[SegmentFetch]) -> RoundPlan {
    let parts: Vec<Option<Bytes>> = fetches.iter().map(|f| cache.lookup(&f.key)).collect();
    let misses = parts
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.is_none().then_some(i))
        .collect();
    RoundPlan { parts, misses }
}

pub(crate) fn record_round(stats: &mut QueryStats, fetches: &[SegmentFetch], plan: &RoundPlan) {
    let units = fetches.len() as u32;
    let misses = plan.misses.len() as u32;
    stats.rounds.push(RoundStats {
        units,
        hits: units - misses,
    });
    stats.cache_hits += (units - misses) as u64;
    stats.cache_misses += misses as u64;
    if misses > 0 {
        stats.roundtrips += 1;
        stats.requests += misses as u64;
        stats.bytes_read += plan
            .misses
            .iter()
            .map(|&i| fetches[i].request.length)
            .sum::<u64>();
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

/// Runs one task to completion against `store` through `cache`.
///
/// On a virtual-time simulated store the modeled compute advances the
/// simulator clock, so back-to-back queries see consistent time.
pub fn execute(
    task: &mut dyn SearchTask,
    store: &dyn ObjectStore,
    cache: &SegmentCache,
    compute: ComputeModel,
) -> Result<(SearchOutput, QueryStats)> {
    let mut stats = QueryStats::default();
    let sim_virtual = store
        .as_simulated()
        .filter(|s| s.mode() == ClockMode::Virtual);
    let charge = |stats: &mut QueryStats, work: Work, wall: Duration| {
        let dt = compute.charge(work, wall);
        stats.compute += dt;
        stats.work.add(work);
        if let Some(sim) = sim_virtual {
            sim.with_engine(|e| e.run_until(e.now() + dt.as_secs_f64()));
        }
    };
    let (res, wall) = timed(|| task.start());
    let (mut step, work) = res?;
    charge(&mut stats, work, wall);
    loop {
        match step {
            Step::Done(out) => {
                stats.absorb_output(&out);
                stats.latency = stats.compute + stats.io_wait;
                return Ok((out, stats));
            }
            Step::Fetch(fetches) => {
                let plan = plan_round(cache, &fetches);
                record_round(&mut stats, &fetches, &plan);
                let mut parts = plan.parts;
                if !plan.misses.is_empty() {
                    let reqs: Vec<ReadRequest> = plan
                        .misses
                        .iter()
                        .map(|&i| fetches[i].request.clone())
                        .collect();
                    let got = store.get_batch(&reqs)?;
                    let read_stats: Vec<ReadStats> = got.iter().map(|(_, s)| *s).collect();
                    stats.io_wait += crate::storage::roundtrip_latency(&read_stats);
                    stats.queue_wait += read_stats.iter().map(|s| s.queue_wait).sum::<Duration>();
                    for (&i, (bytes, _)) in plan.misses.iter().zip(got) {
                        cache.insert(fetches[i].key.clone(), bytes.clone());
                        parts[i] = Some(bytes);
                    }
                }
                let segments = parts.into_iter().map(|p| p.expect("resolved")).collect();
                let (res, wall) = timed(|| task.resume(segments));
                let (next, work) = res?;
                charge(&mut stats, work, wall);
                step = next;
            }
        }
    }
}
