//! Discrete-event object-store model.
//!
//! A read goes through three phases: it waits for a GET token (FIFO token
//! bucket), then for its time-to-first-byte, then streams its bytes through
//! a shared pipe. The pipe is processor-shared: at every instant the active
//! transfers split the bandwidth equally.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::time::{Duration, Instant};

use bytes::Bytes;
use ordered_float::OrderedFloat;
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::bucket::TokenBucket;
use super::{MemoryStore, ObjectStore, ReadRequest, ReadStats, StorageMetrics, StorageProfile};
use crate::{Error, Result};

// Remaining-byte threshold below which a transfer counts as drained.
const DRAIN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Simulated time; nothing sleeps.
    #[default]
    Virtual,
    /// Delays are realized by sleeping against the wall clock.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    FirstByte,
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    at: OrderedFloat<f64>,
    seq: u64,
    kind: EventKind,
    id: u64,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    tag: u64,
    submit: f64,
    grant: f64,
    first_byte: f64,
    length: u64,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    id: u64,
    remaining: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompletionKind {
    Read(ReadStats),
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completion {
    pub id: u64,
    pub tag: u64,
    pub at: f64,
    pub kind: CompletionKind,
}

/// The event engine. Time is kept in seconds as `f64`.
#[derive(Debug)]
pub struct SimEngine {
    profile: StorageProfile,
    now: f64,
    rng: ChaCha8Rng,
    ttfb: Option<LogNormal<f64>>,
    bucket: TokenBucket,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    next_id: u64,
    pending: HashMap<u64, Pending>,
    active: Vec<Active>,
    ready: VecDeque<Completion>,
    gets: u64,
    bytes: u64,
    lat_sum: f64,
    lat_excl_sum: f64,
    first_submit: Option<f64>,
    last_done: f64,
    grants: Vec<f64>,
    window_bytes: Vec<f64>,
}

impl SimEngine {
    pub fn new(profile: StorageProfile) -> Result<Self> {
        profile.validate()?;
        let median = profile.ttfb_p50.as_secs_f64();
        let ttfb = if profile.ttfb_dispersion > 0.0 {
            Some(
                LogNormal::new(median.ln(), profile.ttfb_dispersion)
                    .map_err(|e| Error::invalid(format!("ttfb distribution: {e}")))?,
            )
        } else {
            None
        };
        Ok(SimEngine {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            bucket: TokenBucket::new(profile.get_rate_limit, profile.token_burst),
            profile,
            now: 0.0,
            ttfb,
            events: BinaryHeap::new(),
            seq: 0,
            next_id: 0,
            pending: HashMap::new(),
            active: Vec::new(),
            ready: VecDeque::new(),
            gets: 0,
            bytes: 0,
            lat_sum: 0.0,
            lat_excl_sum: 0.0,
            first_submit: None,
            last_done: 0.0,
            grants: Vec::new(),
            window_bytes: Vec::new(),
        })
    }

    pub fn profile(&self) -> &StorageProfile {
        &self.profile
    }

    /// Current virtual time in seconds.
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Requests submitted but not yet completed.
    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Grant times of every GET token handed out, in grant order.
    pub fn grant_times(&self) -> &[f64] {
        &self.grants
    }

    /// Bytes moved through the pipe during each 1-second virtual window.
    pub fn window_bytes(&self) -> &[f64] {
        &self.window_bytes
    }

    fn push_event(&mut self, at: f64, kind: EventKind, id: u64) {
        self.seq += 1;
        self.events.push(Reverse(Event {
            at: OrderedFloat(at),
            seq: self.seq,
            kind,
            id,
        }));
    }

    fn sample_ttfb(&mut self) -> f64 {
        match &self.ttfb {
            Some(d) => d.sample(&mut self.rng),
            None => self.profile.ttfb_p50.as_secs_f64(),
        }
    }

    /// Submits a read of `length` bytes at the current time.
    pub fn submit(&mut self, length: u64, tag: u64) -> u64 {
        assert!(length > 0, "zero-length reads are rejected upstream");
        let id = self.next_id;
        self.next_id += 1;
        let grant = self.bucket.acquire(self.now);
        self.grants.push(grant);
        let first_byte = grant + self.sample_ttfb();
        self.first_submit.get_or_insert(self.now);
        self.pending.insert(
            id,
            Pending {
                tag,
                submit: self.now,
                grant,
                first_byte,
                length,
            },
        );
        self.push_event(first_byte, EventKind::FirstByte, id);
        id
    }

    /// Fires a timer completion `delay` after the current time.
    pub fn schedule_timer(&mut self, delay: f64, tag: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.push_event(self.now + delay.max(0.0), EventKind::Timer, id);
        self.pending.insert(
            id,
            Pending {
                tag,
                submit: self.now,
                grant: self.now,
                first_byte: self.now,
                length: 0,
            },
        );
        id
    }

    fn next_drain(&self) -> Option<f64> {
        let m = self.active.len();
        if m == 0 {
            return None;
        }
        let min = self
            .active
            .iter()
            .map(|a| a.remaining)
            .fold(f64::INFINITY, f64::min);
        Some(self.now + min.max(0.0) * m as f64 / self.profile.bandwidth_bytes_per_sec)
    }

    /// Earliest time at which something happens next.
    pub fn next_event_time(&self) -> Option<f64> {
        let ev = self.events.peek().map(|Reverse(e)| e.at.0);
        match (ev, self.next_drain()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn account_bytes(&mut self, from: f64, to: f64) {
        let bw = self.profile.bandwidth_bytes_per_sec;
        let mut t = from;
        while t < to {
            let bucket = t.floor() as usize;
            let end = ((bucket + 1) as f64).min(to);
            if self.window_bytes.len() <= bucket {
                self.window_bytes.resize(bucket + 1, 0.0);
            }
            self.window_bytes[bucket] += bw * (end - t);
            t = end;
        }
    }

    fn advance(&mut self, to: f64) {
        let dt = to - self.now;
        if dt > 0.0 && !self.active.is_empty() {
            let share = self.profile.bandwidth_bytes_per_sec * dt / self.active.len() as f64;
            for a in &mut self.active {
                a.remaining -= share;
            }
            self.account_bytes(self.now, to);
        }
        if to > self.now {
            self.now = to;
        }
    }

    fn complete_read(&mut self, id: u64) {
        let p = self.pending.remove(&id).expect("known request");
        let stats = ReadStats {
            queue_wait: Duration::from_secs_f64(p.grant - p.submit),
            ttfb: Duration::from_secs_f64(p.first_byte - p.grant),
            transfer: Duration::from_secs_f64((self.now - p.first_byte).max(0.0)),
            bytes: p.length,
        };
        self.gets += 1;
        self.bytes += p.length;
        self.lat_sum += self.now - p.submit;
        self.lat_excl_sum += self.now - p.grant;
        self.last_done = self.last_done.max(self.now);
        self.ready.push_back(Completion {
            id,
            tag: p.tag,
            at: self.now,
            kind: CompletionKind::Read(stats),
        });
    }

    /// Processes the next event. Returns false when the engine is idle.
    fn step(&mut self) -> bool {
        let ev = self.events.peek().map(|Reverse(e)| e.at.0);
        let drain = self.next_drain();
        match (ev, drain) {
            (None, None) => false,
            (ev, Some(d)) if ev.is_none_or(|e| d <= e) => {
                self.advance(d);
                let (min_idx, _) = self
                    .active
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.remaining.total_cmp(&b.1.remaining))
                    .expect("active transfers");
                self.active[min_idx].remaining = 0.0;
                let mut done = Vec::new();
                self.active.retain(|a| {
                    if a.remaining <= DRAIN_EPS {
                        done.push(a.id);
                        false
                    } else {
                        true
                    }
                });
                for id in done {
                    self.complete_read(id);
                }
                true
            }
            _ => {
                let Reverse(e) = self.events.pop().expect("peeked");
                self.advance(e.at.0);
                match e.kind {
                    EventKind::FirstByte => {
                        let len = self.pending[&e.id].length;
                        self.active.push(Active {
                            id: e.id,
                            remaining: len as f64,
                        });
                    }
                    EventKind::Timer => {
                        let p = self.pending.remove(&e.id).expect("timer");
                        self.ready.push_back(Completion {
                            id: e.id,
                            tag: p.tag,
                            at: self.now,
                            kind: CompletionKind::Timer,
                        });
                    }
                }
                true
            }
        }
    }

    /// Runs until the next completion (read or timer) and returns it.
    pub fn poll(&mut self) -> Option<Completion> {
        loop {
            if let Some(c) = self.ready.pop_front() {
                return Some(c);
            }
            if !self.step() {
                return None;
            }
        }
    }

    /// Processes everything due at or before `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: f64) {
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            self.step();
        }
        self.advance(t);
    }

    pub(crate) fn take_ready(&mut self) -> impl Iterator<Item = Completion> + '_ {
        self.ready.drain(..)
    }

    /// Drains all pending events and returns the elapsed virtual time.
    pub fn advance_to_idle(&mut self) -> Duration {
        let start = self.now;
        while self.step() {}
        Duration::from_secs_f64(self.now - start)
    }

    pub fn metrics(&self) -> StorageMetrics {
        let window = self
            .first_submit
            .map(|f| self.last_done - f)
            .unwrap_or(0.0);
        StorageMetrics::from_totals(self.gets, self.bytes, window, self.lat_sum, self.lat_excl_sum)
    }

    pub fn reset_metrics(&mut self) {
        self.gets = 0;
        self.bytes = 0;
        self.lat_sum = 0.0;
        self.lat_excl_sum = 0.0;
        self.first_submit = None;
        self.last_done = self.now;
        self.grants.clear();
        self.window_bytes.clear();
    }
}

#[derive(Debug)]
struct Inner {
    engine: SimEngine,
    stash: HashMap<u64, Completion>,
}

impl Inner {
    fn collect(&mut self) {
        let ready: Vec<Completion> = self.engine.take_ready().collect();
        for c in ready {
            self.stash.insert(c.id, c);
        }
    }

    fn claim(&mut self, ids: &[u64]) -> Option<Vec<ReadStats>> {
        if !ids.iter().all(|id| self.stash.contains_key(id)) {
            return None;
        }
        Some(
            ids.iter()
                .map(|id| match self.stash.remove(id).expect("present").kind {
                    CompletionKind::Read(s) => s,
                    CompletionKind::Timer => unreachable!("reads only"),
                })
                .collect(),
        )
    }
}

/// Object store whose reads are timed by a [`SimEngine`].
///
/// The synchronous `get`/`get_batch` calls block until their requests
/// complete: in virtual mode by running the engine forward, in wall mode by
/// sleeping until the modeled completion time has passed. The workload
/// driver instead talks to the engine directly through [`SimulatedStore::with_engine`]
/// to interleave many queries in virtual time.
#[derive(Debug)]
pub struct SimulatedStore {
    objects: MemoryStore,
    inner: Mutex<Inner>,
    mode: ClockMode,
    epoch: Instant,
}

impl SimulatedStore {
    pub fn new(profile: StorageProfile, objects: MemoryStore, mode: ClockMode) -> Result<Self> {
        Ok(SimulatedStore {
            objects,
            inner: Mutex::new(Inner {
                engine: SimEngine::new(profile)?,
                stash: HashMap::new(),
            }),
            mode,
            epoch: Instant::now(),
        })
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn objects(&self) -> &MemoryStore {
        &self.objects
    }

    /// Validates `request` and returns its bytes without modeling any I/O.
    pub fn read_bytes(&self, request: &ReadRequest) -> Result<Bytes> {
        self.objects.slice(request)
    }

    /// Exclusive access to the event engine.
    pub fn with_engine<R>(&self, f: impl FnOnce(&mut SimEngine) -> R) -> R {
        f(&mut self.inner.lock().engine)
    }

    fn wall_now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

impl ObjectStore for SimulatedStore {
    fn backend_name(&self) -> &'static str {
        "sim"
    }

    fn object_len(&self, key: &str) -> Result<u64> {
        self.objects.object_len(key)
    }

    fn get(&self, request: &ReadRequest) -> Result<(Bytes, ReadStats)> {
        let mut out = self.get_batch(std::slice::from_ref(request))?;
        Ok(out.pop().expect("one result"))
    }

    fn get_batch(&self, requests: &[ReadRequest]) -> Result<Vec<(Bytes, ReadStats)>> {
        if requests.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let data = requests
            .iter()
            .map(|r| self.objects.slice(r))
            .collect::<Result<Vec<_>>>()?;
        let stats = match self.mode {
            ClockMode::Virtual => {
                let mut inner = self.inner.lock();
                let ids: Vec<u64> = requests
                    .iter()
                    .map(|r| inner.engine.submit(r.length, 0))
                    .collect();
                loop {
                    inner.collect();
                    if let Some(s) = inner.claim(&ids) {
                        break s;
                    }
                    match inner.engine.poll() {
                        Some(c) => {
                            inner.stash.insert(c.id, c);
                        }
                        None => unreachable!("submitted reads always complete"),
                    }
                }
            }
            ClockMode::Wall => {
                let ids: Vec<u64> = {
                    let mut inner = self.inner.lock();
                    let now = self.wall_now();
                    inner.engine.run_until(now);
                    inner.collect();
                    requests
                        .iter()
                        .map(|r| inner.engine.submit(r.length, 0))
                        .collect()
                };
                loop {
                    let wait = {
                        let mut inner = self.inner.lock();
                        let now = self.wall_now();
                        inner.engine.run_until(now);
                        inner.collect();
                        if let Some(s) = inner.claim(&ids) {
                            break s;
                        }
                        inner
                            .engine
                            .next_event_time()
                            .map(|t| (t - now).clamp(0.0, 0.001))
                            .unwrap_or(0.0002)
                    };
                    std::thread::sleep(Duration::from_secs_f64(wait.max(50e-6)));
                }
            }
        };
        Ok(data.into_iter().zip(stats).collect())
    }

    fn snapshot_metrics(&self) -> StorageMetrics {
        self.inner.lock().engine.metrics()
    }

    fn reset_metrics(&self) {
        self.inner.lock().engine.reset_metrics();
    }

    fn advance_to_idle(&self) -> Result<Duration> {
        let mut inner = self.inner.lock();
        let d = inner.engine.advance_to_idle();
        inner.collect();
        Ok(d)
    }

    fn as_simulated(&self) -> Option<&SimulatedStore> {
        Some(self)
    }
}

/// Latency of a roundtrip: the slowest member of the batch.
pub fn roundtrip_latency(stats: &[ReadStats]) -> Duration {
    stats.iter().map(ReadStats::latency).max().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;

    fn profile() -> StorageProfile {
        StorageProfile {
            token_burst: 1_000,
            ..StorageProfile::default()
        }
    }

    fn store_with(profile: StorageProfile, size: usize) -> SimulatedStore {
        let objects = MemoryStore::new();
        objects.put("idx/obj", vec![7u8; size]);
        SimulatedStore::new(profile, objects, ClockMode::Virtual).unwrap()
    }

    fn close(a: Duration, b: f64) -> bool {
        (a.as_secs_f64() - b).abs() < 1e-9
    }

    #[test]
    fn single_read_closed_form() {
        let store = store_with(profile(), MIB as usize);
        let (bytes, stats) = store.get(&ReadRequest::new("idx/obj", 0, MIB)).unwrap();
        assert_eq!(bytes.len() as u64, MIB);
        let expected = 0.031 + MIB as f64 / 625e6;
        assert!(close(stats.latency(), expected), "{:?}", stats);
        assert!((expected - 0.03268).abs() < 1e-5);
        assert_eq!(stats.queue_wait, Duration::ZERO);
    }

    #[test]
    fn two_simultaneous_reads_share_the_pipe() {
        let store = store_with(profile(), 2 * MIB as usize);
        let reqs = vec![
            ReadRequest::new("idx/obj", 0, MIB),
            ReadRequest::new("idx/obj", MIB, MIB),
        ];
        let out = store.get_batch(&reqs).unwrap();
        let expected = 0.031 + 2.0 * MIB as f64 / 625e6;
        assert!((expected - 0.03435).abs() < 1e-5);
        for (_, s) in &out {
            assert!(close(s.latency(), expected));
        }
    }

    #[test]
    fn batch_of_one_equals_get() {
        let a = store_with(profile(), 4096);
        let b = store_with(profile(), 4096);
        let r = ReadRequest::new("idx/obj", 0, 4096);
        let (_, s1) = a.get(&r).unwrap();
        let s2 = b.get_batch(&[r]).unwrap()[0].1;
        assert_eq!(s1, s2);
    }

    #[test]
    fn batch_of_four_is_one_roundtrip() {
        let len = 256 * 1024;
        let store = store_with(profile(), 4 * len as usize);
        let reqs: Vec<_> = (0..4)
            .map(|i| ReadRequest::new("idx/obj", i * len, len))
            .collect();
        let out = store.get_batch(&reqs).unwrap();
        let stats: Vec<_> = out.iter().map(|(_, s)| *s).collect();
        // members overlap fully: one TTFB, pipe split four ways
        let rt = roundtrip_latency(&stats);
        assert!(close(rt, 0.031 + 4.0 * len as f64 / 625e6));
        let single = store_with(profile(), 4 * len as usize);
        let (_, whole) = single.get(&ReadRequest::new("idx/obj", 0, 4 * len)).unwrap();
        assert!(close(rt, whole.latency().as_secs_f64()));
    }

    #[test]
    fn token_bucket_delays_batch_members() {
        let p = StorageProfile {
            get_rate_limit: 2.0,
            token_burst: 2,
            ..StorageProfile::default()
        };
        let store = store_with(p, 4096);
        let reqs: Vec<_> = (0..4).map(|i| ReadRequest::new("idx/obj", i * 8, 8)).collect();
        let out = store.get_batch(&reqs).unwrap();
        let waits: Vec<f64> = out.iter().map(|(_, s)| s.queue_wait.as_secs_f64()).collect();
        assert_eq!(waits[0], 0.0);
        assert_eq!(waits[1], 0.0);
        assert!((waits[2] - 0.5).abs() < 1e-12);
        assert!((waits[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advance_to_idle_cases() {
        let mut e = SimEngine::new(profile()).unwrap();
        assert_eq!(e.advance_to_idle(), Duration::ZERO);
        e.schedule_timer(0.031, 0);
        assert!(close(e.advance_to_idle(), 0.031));
    }

    #[test]
    fn metrics_after_one_get() {
        let store = store_with(profile(), 8192);
        assert_eq!(store.snapshot_metrics(), StorageMetrics::default());
        store.get(&ReadRequest::new("idx/obj", 0, 4096)).unwrap();
        let m = store.snapshot_metrics();
        assert_eq!((m.gets, m.bytes), (1, 4096));
        assert!(m.mean_latency >= Duration::from_millis(31));
    }

    #[test]
    fn throttled_rate_is_bounded() {
        let p = StorageProfile {
            get_rate_limit: 100.0,
            token_burst: 5,
            ..StorageProfile::default()
        };
        let mut e = SimEngine::new(p).unwrap();
        for i in 0..1000 {
            e.submit(64, i);
        }
        e.advance_to_idle();
        let m = e.metrics();
        assert_eq!(m.gets, 1000);
        assert!(m.get_rate <= 105.0, "rate {}", m.get_rate);
    }

    #[test]
    fn lognormal_ttfb_is_seeded() {
        let p = StorageProfile {
            ttfb_dispersion: 0.5,
            seed: 42,
            ..profile()
        };
        let run = || {
            let store = store_with(p.clone(), 4096);
            (0..20)
                .map(|i| store.get(&ReadRequest::new("idx/obj", i * 100, 100)).unwrap().1)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().any(|s| s.ttfb != a[0].ttfb));
    }

    #[test]
    fn wall_mode_sleeps_for_modeled_latency() {
        let p = StorageProfile {
            ttfb_p50: Duration::from_millis(20),
            ..profile()
        };
        let objects = MemoryStore::new();
        objects.put("k", vec![0u8; 4096]);
        let store = SimulatedStore::new(p, objects, ClockMode::Wall).unwrap();
        let t = Instant::now();
        let (_, s) = store.get(&ReadRequest::new("k", 0, 4096)).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(20));
        assert!(s.ttfb >= Duration::from_millis(20) - Duration::from_micros(1));
    }

    #[test]
    fn rejects_bad_profiles() {
        let bad = StorageProfile {
            bandwidth_bytes_per_sec: 0.0,
            ..StorageProfile::default()
        };
        assert!(SimEngine::new(bad).is_err());
        let bad = StorageProfile {
            ttfb_dispersion: -1.0,
            ..StorageProfile::default()
        };
        assert!(SimEngine::new(bad).is_err());
    }
}
