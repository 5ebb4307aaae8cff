//! Concurrency-controlled query workloads and parameter sweeps.
//!
//! In virtual-time mode every in-flight query is a [`SearchTask`] driven by
//! the simulator's event loop: compute steps become timers, fetch rounds
//! become reads, and a finished query immediately admits the next one. In
//! wall mode a pool of `concurrency` worker threads runs queries to
//! completion against the store.

mod config;
mod report;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use config::{BackendKind, BenchSection, Config, CostSection, StorageSection, SweepSection};
pub use report::{
    curves, emit_report, parse_csv, parse_jsonl, Curve, CurvePoint, Environment, QueryRecord, ReportFormat,
    WorkloadReport, SCHEMA_VERSION,
};

use crate::cache::{CacheConfig, SegmentCache};
use crate::cluster::ClusterIndex;
use crate::costmodel::IndexFamily;
use crate::dataset::{recall_at_k, ElemType, GroundTruth, VectorDataset};
use crate::graph::GraphIndex;
use crate::par::{self, Exec};
use crate::search::{
    check_query, execute, plan_round, record_round, ComputeModel, QueryStats, SearchOutput, SearchTask,
    SegmentFetch, Step, Work,
};
use crate::storage::{
    ClockMode, CompletionKind, FileStore, MemoryStore, ObjectStore, ReadRequest, SimEngine, SimulatedStore,
    StorageProfile,
};
use crate::{Error, Result};

/// An index under test.
#[derive(Debug, Clone, Copy)]
pub enum BenchIndex<'a> {
    Cluster(&'a ClusterIndex),
    Graph(&'a GraphIndex),
}

impl<'a> BenchIndex<'a> {
    pub fn family(&self) -> IndexFamily {
        match self {
            BenchIndex::Cluster(_) => IndexFamily::Cluster,
            BenchIndex::Graph(_) => IndexFamily::Graph,
        }
    }

    /// The recall knob swept for this family.
    pub fn param_name(&self) -> &'static str {
        match self {
            BenchIndex::Cluster(_) => "nprobe",
            BenchIndex::Graph(_) => "search_len",
        }
    }

    pub fn index_id(&self) -> &str {
        match self {
            BenchIndex::Cluster(c) => c.index_id(),
            BenchIndex::Graph(g) => g.index_id(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BenchIndex::Cluster(c) => c.dim(),
            BenchIndex::Graph(g) => g.dim(),
        }
    }

    pub fn elem(&self) -> ElemType {
        match self {
            BenchIndex::Cluster(c) => c.elem(),
            BenchIndex::Graph(g) => g.elem(),
        }
    }

    /// Default sweep values: search_len doubles from 10 to 1280; nprobe
    /// doubles from 1 up to the list count.
    pub fn default_values(&self) -> Vec<usize> {
        match self {
            BenchIndex::Cluster(c) => std::iter::successors(Some(1usize), |v| Some(v * 2))
                .take_while(|&v| v <= c.list_count().min(16_384))
                .collect(),
            BenchIndex::Graph(_) => (0..8).map(|i| 10 << i).collect(),
        }
    }

    pub fn task(&self, query: crate::search::QueryVec, value: usize, beam_width: usize, k: usize) -> Result<Box<dyn SearchTask + 'a>> {
        Ok(match *self {
            BenchIndex::Cluster(c) => Box::new(c.search_task(query, value, k)?),
            BenchIndex::Graph(g) => Box::new(g.search_task(query, value, beam_width, k)?),
        })
    }
}

/// Queries plus their exact neighbors.
#[derive(Debug, Clone, Copy)]
pub struct Workload<'a> {
    pub index: BenchIndex<'a>,
    pub queries: &'a VectorDataset,
    pub truth: &'a GroundTruth,
}

impl Workload<'_> {
    fn validate(&self, k: usize) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::invalid("workload has no queries"));
        }
        check_query(self.queries.row(0), self.index.dim(), self.index.elem())?;
        if self.truth.query_count() != self.queries.count() {
            return Err(Error::invalid(format!(
                "ground truth covers {} queries, workload has {}",
                self.truth.query_count(),
                self.queries.count()
            )));
        }
        if self.truth.k() < k {
            return Err(Error::invalid(format!(
                "ground truth holds {} neighbors, k={k} requested",
                self.truth.k()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// nprobe or search_len, depending on the index family.
    pub value: usize,
    pub beam_width: usize,
    pub k: usize,
    pub concurrency: usize,
    pub compute: ComputeModel,
    /// Clock for non-simulated backends; a simulated store uses its own.
    pub mode: ClockMode,
    /// Echoed into the report.
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            value: 16,
            beam_width: 4,
            k: 10,
            concurrency: 1,
            compute: ComputeModel::default(),
            mode: ClockMode::Virtual,
            seed: 0,
        }
    }
}

struct Finished {
    query: usize,
    output: SearchOutput,
    stats: QueryStats,
}

struct RunOutcome {
    finished: Vec<Finished>,
    elapsed: f64,
    max_in_flight: usize,
    error: Option<String>,
}

struct Round {
    fetches: Vec<SegmentFetch>,
    parts: Vec<Option<Bytes>>,
    waiting: HashMap<u64, usize>,
    started: f64,
}

struct Slot<'a> {
    task: Box<dyn SearchTask + 'a>,
    stats: QueryStats,
    admitted: f64,
    next: Option<Step>,
    round: Option<Round>,
}

/// Event-loop driver. `sim` supplies bytes for simulated reads; without it
/// reads go to `store` synchronously and take no virtual time.
struct VirtualDriver<'a, 'w> {
    workload: &'w Workload<'a>,
    spec: &'w WorkloadSpec,
    store: &'w dyn ObjectStore,
    sim: Option<&'w SimulatedStore>,
    cache: &'w SegmentCache,
    slots: Vec<Option<Slot<'a>>>,
    next_query: usize,
    in_flight: usize,
    max_in_flight: usize,
    finished: Vec<Finished>,
}

impl<'a> VirtualDriver<'a, '_> {
    fn charge(&self, engine: &mut SimEngine, q: usize, slot: &mut Slot<'a>, step: Step, work: Work, wall: Duration) {
        let dt = self.spec.compute.charge(work, wall);
        slot.stats.compute += dt;
        slot.stats.work.add(work);
        slot.next = Some(step);
        engine.schedule_timer(dt.as_secs_f64(), q as u64);
    }

    fn admit(&mut self, engine: &mut SimEngine) -> Result<()> {
        while self.in_flight < self.spec.concurrency && self.next_query < self.workload.queries.count() {
            let q = self.next_query;
            self.next_query += 1;
            self.in_flight += 1;
            self.max_in_flight = self.max_in_flight.max(self.in_flight);
            let query = self.workload.queries.row(q).into();
            let mut slot = Slot {
                task: self.workload.index.task(query, self.spec.value, self.spec.beam_width, self.spec.k)?,
                stats: QueryStats::default(),
                admitted: engine.now(),
                next: None,
                round: None,
            };
            let t = Instant::now();
            let (step, work) = slot.task.start()?;
            self.charge(engine, q, &mut slot, step, work, t.elapsed());
            self.slots[q] = Some(slot);
        }
        Ok(())
    }

    fn resume(&mut self, engine: &mut SimEngine, q: usize, mut slot: Slot<'a>, parts: Vec<Option<Bytes>>) -> Result<()> {
        let segments = parts.into_iter().map(|p| p.expect("resolved")).collect();
        let t = Instant::now();
        let (step, work) = slot.task.resume(segments)?;
        self.charge(engine, q, &mut slot, step, work, t.elapsed());
        self.slots[q] = Some(slot);
        Ok(())
    }

    fn on_timer(&mut self, engine: &mut SimEngine, q: usize) -> Result<()> {
        let mut slot = self.slots[q].take().expect("active query");
        match slot.next.take().expect("pending step") {
            Step::Done(output) => {
                slot.stats.absorb_output(&output);
                slot.stats.latency = Duration::from_secs_f64(engine.now() - slot.admitted);
                self.finished.push(Finished {
                    query: q,
                    output,
                    stats: slot.stats,
                });
                self.in_flight -= 1;
                self.admit(engine)
            }
            Step::Fetch(fetches) => {
                let plan = plan_round(self.cache, &fetches);
                record_round(&mut slot.stats, &fetches, &plan);
                let mut parts = plan.parts;
                if plan.misses.is_empty() {
                    return self.resume(engine, q, slot, parts);
                }
                let requests: Vec<ReadRequest> = plan.misses.iter().map(|&i| fetches[i].request.clone()).collect();
                match self.sim {
                    Some(sim) => {
                        let mut waiting = HashMap::new();
                        for (&i, r) in plan.misses.iter().zip(&requests) {
                            parts[i] = Some(sim.read_bytes(r)?);
                            waiting.insert(engine.submit(r.length, q as u64), i);
                        }
                        // bytes are held back until the read completes
                        let round = Round {
                            fetches,
                            parts,
                            waiting,
                            started: engine.now(),
                        };
                        slot.round = Some(round);
                        self.slots[q] = Some(slot);
                        Ok(())
                    }
                    None => {
                        let got = self.store.get_batch(&requests)?;
                        for (&i, (bytes, _)) in plan.misses.iter().zip(got) {
                            self.cache.insert(fetches[i].key.clone(), bytes.clone());
                            parts[i] = Some(bytes);
                        }
                        self.resume(engine, q, slot, parts)
                    }
                }
            }
        }
    }

    fn on_read(&mut self, engine: &mut SimEngine, q: usize, id: u64, queue_wait: Duration) -> Result<()> {
        let slot = self.slots[q].as_mut().expect("active query");
        slot.stats.queue_wait += queue_wait;
        let round = slot.round.as_mut().expect("round in progress");
        let i = round.waiting.remove(&id).expect("read belongs to round");
        let bytes = round.parts[i].clone().expect("bytes staged");
        self.cache.insert(round.fetches[i].key.clone(), bytes);
        if !round.waiting.is_empty() {
            return Ok(());
        }
        let mut slot = self.slots[q].take().expect("active query");
        let round = slot.round.take().expect("round");
        slot.stats.io_wait += Duration::from_secs_f64(engine.now() - round.started);
        self.resume(engine, q, slot, round.parts)
    }

    fn run(&mut self, engine: &mut SimEngine) -> RunOutcome {
        let start = engine.now();
        let mut error = self.admit(engine).err();
        while error.is_none() {
            let Some(c) = engine.poll() else { break };
            let q = c.tag as usize;
            let res = match c.kind {
                CompletionKind::Timer => self.on_timer(engine, q),
                CompletionKind::Read(s) => self.on_read(engine, q, c.id, s.queue_wait),
            };
            error = res.err();
        }
        if error.is_some() {
            while engine.poll().is_some() {}
        }
        let elapsed = if self.finished.is_empty() { 0.0 } else { engine.now() - start };
        RunOutcome {
            finished: std::mem::take(&mut self.finished),
            elapsed,
            max_in_flight: self.max_in_flight,
            error: error.map(|e| e.to_string()),
        }
    }
}

fn run_virtual(workload: &Workload<'_>, spec: &WorkloadSpec, store: &dyn ObjectStore, cache: &SegmentCache) -> RunOutcome {
    let sim = store.as_simulated();
    let mut driver = VirtualDriver {
        workload,
        spec,
        store,
        sim,
        cache,
        slots: (0..workload.queries.count()).map(|_| None).collect(),
        next_query: 0,
        in_flight: 0,
        max_in_flight: 0,
        finished: Vec::new(),
    };
    match sim {
        Some(s) => s.with_engine(|e| driver.run(e)),
        None => {
            let mut timers = SimEngine::new(StorageProfile::default()).expect("default profile is valid");
            driver.run(&mut timers)
        }
    }
}

fn run_wall(workload: &Workload<'_>, spec: &WorkloadSpec, store: &dyn ObjectStore, cache: &SegmentCache) -> RunOutcome {
    let n = workload.queries.count();
    let workers = spec.concurrency.min(n);
    let next = AtomicUsize::new(0);
    let finished = Mutex::new(Vec::with_capacity(n));
    let error = Mutex::new(None);
    let start = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if error.lock().is_some() {
                    break;
                }
                let q = next.fetch_add(1, Ordering::SeqCst);
                if q >= n {
                    break;
                }
                let res = workload
                    .index
                    .task(workload.queries.row(q).into(), spec.value, spec.beam_width, spec.k)
                    .and_then(|mut task| execute(task.as_mut(), store, cache, spec.compute));
                match res {
                    Ok((output, stats)) => finished.lock().push(Finished { query: q, output, stats }),
                    Err(e) => {
                        error.lock().get_or_insert(e.to_string());
                    }
                }
            });
        }
    });
    RunOutcome {
        finished: finished.into_inner(),
        elapsed: start.elapsed().as_secs_f64(),
        max_in_flight: workers,
        error: error.into_inner(),
    }
}

/// Runs every query of `workload` with at most `spec.concurrency` in flight.
///
/// Storage metrics are reset at the start of the run. A failure mid-run
/// yields a partial report with `valid = false`.
pub fn run_workload(
    workload: &Workload<'_>,
    spec: &WorkloadSpec,
    store: &dyn ObjectStore,
    cache: &SegmentCache,
) -> Result<WorkloadReport> {
    workload.validate(spec.k)?;
    if spec.concurrency == 0 {
        return Err(Error::invalid("concurrency must be >= 1"));
    }
    let mode = store.as_simulated().map(|s| s.mode()).unwrap_or(spec.mode);
    store.reset_metrics();
    cache.reset_stats();
    let outcome = match mode {
        ClockMode::Virtual => run_virtual(workload, spec, store, cache),
        ClockMode::Wall => run_wall(workload, spec, store, cache),
    };
    let metrics = store.snapshot_metrics();
    Ok(report::assemble(workload, spec, mode, store, cache, outcome, metrics))
}

/// Object-store backend for harness-created stores.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Memory,
    File(PathBuf),
    Simulated { profile: StorageProfile, mode: ClockMode },
}

/// Everything needed to open a fresh store and cache for one sweep cell.
#[derive(Debug)]
pub struct Harness {
    pub objects: MemoryStore,
    pub backend: Backend,
    pub cache: CacheConfig,
}

impl Harness {
    pub fn open_store(&self) -> Result<Box<dyn ObjectStore>> {
        Ok(match &self.backend {
            Backend::Memory => Box::new(self.objects.duplicate()),
            Backend::File(root) => Box::new(FileStore::new(root.clone())),
            Backend::Simulated { profile, mode } => {
                Box::new(SimulatedStore::new(profile.clone(), self.objects.duplicate(), *mode)?)
            }
        })
    }

    pub fn mode(&self, fallback: ClockMode) -> ClockMode {
        match &self.backend {
            Backend::Simulated { mode, .. } => *mode,
            _ => fallback,
        }
    }

    /// One cold-start cell: fresh store, fresh cache.
    pub fn run_cell(&self, workload: &Workload<'_>, spec: &WorkloadSpec) -> Result<WorkloadReport> {
        let store = self.open_store()?;
        let cache = SegmentCache::new(&self.cache)?;
        run_workload(workload, spec, store.as_ref(), &cache)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub values: Vec<usize>,
    pub concurrencies: Vec<usize>,
    /// Stop the value axis once a cell's recall exceeds this.
    pub early_stop: Option<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.concurrencies.is_empty() {
            return Err(Error::invalid("sweep needs at least one value and one concurrency"));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sweep values must be strictly increasing"));
        }
        if self.concurrencies.contains(&0) {
            return Err(Error::invalid("concurrency must be >= 1"));
        }
        Ok(())
    }
}

/// Runs the `(value, concurrency)` grid, each cell cold. Concurrency
/// columns run in parallel under virtual time; reports come back ordered
/// by concurrency, then value.
pub fn sweep(workload: &Workload<'_>, sweep: &SweepSpec, base: &WorkloadSpec, harness: &Harness) -> Result<Vec<WorkloadReport>> {
    sweep.validate()?;
    workload.validate(base.k)?;
    let column = |&concurrency: &usize| -> Result<Vec<WorkloadReport>> {
        let mut out = Vec::new();
        for &value in &sweep.values {
            let spec = WorkloadSpec {
                value,
                concurrency,
                ..base.clone()
            };
            let report = harness.run_cell(workload, &spec)?;
            let stop = sweep.early_stop.is_some_and(|t| report.mean_recall > t);
            out.push(report);
            if stop {
                break;
            }
        }
        Ok(out)
    };
    let exec = match harness.mode(base.mode) {
        ClockMode::Virtual => Exec::default(),
        ClockMode::Wall => Exec::Sequential,
    };
    let columns = par::map_slice(exec, &sweep.concurrencies, column);
    let mut reports = Vec::new();
    for c in columns {
        reports.extend(c?);
    }
    Ok(reports)
}

fn recall_of(f: &Finished, truth: &GroundTruth, k: usize) -> f64 {
    recall_at_k(&f.output.ids, truth.ids(f.query), k)
}
