//! Byte-range reads over immutable index objects.
//!
//! Three backends share the [`ObjectStore`] interface: [`MemoryStore`],
//! [`FileStore`] (keys map to files under a root directory) and
//! [`SimulatedStore`], a discrete-event model of remote object storage with
//! time-to-first-byte latency, a processor-sharing bandwidth pipe and a
//! token-bucket GET rate limit.

mod bucket;
mod sim;

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use sim::{roundtrip_latency, ClockMode, Completion, CompletionKind, SimEngine, SimulatedStore};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReadRequest {
    pub key: String,
    pub offset: u64,
    pub length: u64,
    /// Groups the requests issued together in one roundtrip.
    pub batch_id: Option<u64>,
}

impl ReadRequest {
    pub fn new(key: impl Into<String>, offset: u64, length: u64) -> Self {
        ReadRequest {
            key: key.into(),
            offset,
            length,
            batch_id: None,
        }
    }
}

/// Modeled timing of one read. In-memory and file backends report zeros for
/// the modeled components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadStats {
    pub queue_wait: Duration,
    pub ttfb: Duration,
    pub transfer: Duration,
    pub bytes: u64,
}

impl ReadStats {
    pub fn latency(&self) -> Duration {
        self.queue_wait + self.ttfb + self.transfer
    }
}

/// Remote-storage characteristics driving the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageProfile {
    pub ttfb_p50: Duration,
    /// Lognormal shape parameter of the TTFB distribution; 0 means constant.
    pub ttfb_dispersion: f64,
    pub bandwidth_bytes_per_sec: f64,
    pub get_rate_limit: f64,
    pub token_burst: u32,
    pub seed: u64,
}

impl Default for StorageProfile {
    /// 31 ms median TTFB, a 5 Gbps pipe and 20,000 GET/s.
    fn default() -> Self {
        StorageProfile {
            ttfb_p50: Duration::from_micros(31_000),
            ttfb_dispersion: 0.0,
            bandwidth_bytes_per_sec: 625e6,
            get_rate_limit: 20_000.0,
            token_burst: 100,
            seed: 0,
        }
    }
}

impl StorageProfile {
    pub fn validate(&self) -> Result<()> {
        if self.ttfb_p50.is_zero() {
            return Err(Error::invalid("ttfb_p50 must be positive"));
        }
        if !(self.ttfb_dispersion >= 0.0 && self.ttfb_dispersion.is_finite()) {
            return Err(Error::invalid("ttfb_dispersion must be >= 0"));
        }
        if !(self.bandwidth_bytes_per_sec > 0.0 && self.bandwidth_bytes_per_sec.is_finite()) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(self.get_rate_limit > 0.0 && self.get_rate_limit.is_finite()) {
            return Err(Error::invalid("get_rate_limit must be positive"));
        }
        if self.token_burst == 0 {
            return Err(Error::invalid("token_burst must be positive"));
        }
        Ok(())
    }
}

/// Aggregate I/O counters since the last reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageMetrics {
    pub gets: u64,
    pub bytes: u64,
    /// First submission to last completion.
    pub window: Duration,
    pub get_rate: f64,
    /// Mean per-request latency including token queueing.
    pub mean_latency: Duration,
    /// Mean per-request latency excluding token queueing.
    pub mean_latency_excl_queue: Duration,
    pub bandwidth: f64,
}

impl StorageMetrics {
    pub(crate) fn from_totals(gets: u64, bytes: u64, window: f64, lat_sum: f64, lat_excl_sum: f64) -> Self {
        let per = |x: f64| {
            if gets == 0 {
                Duration::ZERO
            } else {
                Duration::from_secs_f64(x / gets as f64)
            }
        };
        let rate = |x: f64| if window > 0.0 { x / window } else { 0.0 };
        StorageMetrics {
            gets,
            bytes,
            window: Duration::from_secs_f64(window.max(0.0)),
            get_rate: rate(gets as f64),
            mean_latency: per(lat_sum),
            mean_latency_excl_queue: per(lat_excl_sum),
            bandwidth: rate(bytes as f64),
        }
    }
}

pub trait ObjectStore: Send + Sync {
    fn object_len(&self, key: &str) -> Result<u64>;

    fn get(&self, request: &ReadRequest) -> Result<(Bytes, ReadStats)>;

    /// Issues all requests as one roundtrip. Every member counts as a GET.
    fn get_batch(&self, requests: &[ReadRequest]) -> Result<Vec<(Bytes, ReadStats)>> {
        if requests.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let batch = next_batch_id();
        requests
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.batch_id = Some(batch);
                self.get(&r)
            })
            .collect()
    }

    fn snapshot_metrics(&self) -> StorageMetrics;

    fn reset_metrics(&self);

    /// Drains pending simulated events, returning the virtual time elapsed.
    fn advance_to_idle(&self) -> Result<Duration> {
        Err(Error::NotSimulated)
    }

    fn as_simulated(&self) -> Option<&SimulatedStore> {
        None
    }

    /// Short backend label used in reports.
    fn backend_name(&self) -> &'static str {
        "custom"
    }
}

static BATCH_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_batch_id() -> u64 {
    BATCH_IDS.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn check_range(key: &str, size: u64, offset: u64, length: u64) -> Result<()> {
    if length == 0 {
        return Err(Error::invalid("read length must be positive"));
    }
    match offset.checked_add(length) {
        Some(end) if end <= size => Ok(()),
        _ => Err(Error::OutOfRange {
            key: key.to_string(),
            offset,
            length,
            size,
        }),
    }
}

/// Wall-clock counters for the non-simulated backends.
#[derive(Debug, Default)]
struct WallCounters {
    gets: u64,
    bytes: u64,
    lat_sum: f64,
    first: Option<Instant>,
    last: Option<Instant>,
}

impl WallCounters {
    fn record(&mut self, start: Instant, bytes: u64) {
        let end = Instant::now();
        self.gets += 1;
        self.bytes += bytes;
        self.lat_sum += (end - start).as_secs_f64();
        self.first.get_or_insert(start);
        self.last = Some(end);
    }

    fn snapshot(&self) -> StorageMetrics {
        let window = match (self.first, self.last) {
            (Some(a), Some(b)) => (b - a).as_secs_f64(),
            _ => 0.0,
        };
        StorageMetrics::from_totals(self.gets, self.bytes, window, self.lat_sum, self.lat_sum)
    }
}

/// Objects held in memory. Reads are served by slicing shared buffers.
#[derive(Debug, Default)]
pub struct MemoryStore {
    objects: RwLock<HashMap<String, Bytes>>,
    counters: Mutex<WallCounters>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&self, key: impl Into<String>, data: impl Into<Bytes>) {
        self.objects.write().insert(key.into(), data.into());
    }

    pub fn keys(&self) -> Vec<String> {
        let mut k: Vec<String> = self.objects.read().keys().cloned().collect();
        k.sort();
        k
    }

    /// A new store sharing the same object buffers, with fresh counters.
    pub fn duplicate(&self) -> Self {
        MemoryStore {
            objects: RwLock::new(self.objects.read().clone()),
            counters: Mutex::default(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.objects.read().values().map(|b| b.len() as u64).sum()
    }

    /// Loads every file under `root` with its relative path as key.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let store = MemoryStore::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).expect("under root");
                    let key = rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join("/");
                    store.put(key, fs::read(&path)?);
                }
            }
        }
        Ok(store)
    }

    pub(crate) fn slice(&self, request: &ReadRequest) -> Result<Bytes> {
        let objects = self.objects.read();
        let obj = objects
            .get(&request.key)
            .ok_or_else(|| Error::UnknownKey(request.key.clone()))?;
        check_range(&request.key, obj.len() as u64, request.offset, request.length)?;
        let start = request.offset as usize;
        Ok(obj.slice(start..start + request.length as usize))
    }
}

impl ObjectStore for MemoryStore {
    fn backend_name(&self) -> &'static str {
        "mem"
    }

    fn object_len(&self, key: &str) -> Result<u64> {
        self.objects
            .read()
            .get(key)
            .map(|b| b.len() as u64)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    fn get(&self, request: &ReadRequest) -> Result<(Bytes, ReadStats)> {
        let start = Instant::now();
        let data = self.slice(request)?;
        self.counters.lock().record(start, request.length);
        Ok((
            data,
            ReadStats {
                bytes: request.length,
                ..ReadStats::default()
            },
        ))
    }

    fn snapshot_metrics(&self) -> StorageMetrics {
        self.counters.lock().snapshot()
    }

    fn reset_metrics(&self) {
        *self.counters.lock() = WallCounters::default();
    }
}

/// Objects stored as files; key `a/b/c` maps to `<root>/a/b/c`.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    counters: Mutex<WallCounters>,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FileStore {
            root: root.into(),
            counters: Mutex::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        if key.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        Ok(self.root.join(key))
    }

    pub fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        let path = self.path(key)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, data)?;
        Ok(())
    }
}

impl ObjectStore for FileStore {
    fn backend_name(&self) -> &'static str {
        "file"
    }

    fn object_len(&self, key: &str) -> Result<u64> {
        let path = self.path(key)?;
        fs::metadata(&path)
            .map(|m| m.len())
            .map_err(|_| Error::UnknownKey(key.to_string()))
    }

    fn get(&self, request: &ReadRequest) -> Result<(Bytes, ReadStats)> {
        let start = Instant::now();
        let size = self.object_len(&request.key)?;
        check_range(&request.key, size, request.offset, request.length)?;
        let mut file = fs::File::open(self.path(&request.key)?)?;
        file.seek(SeekFrom::Start(request.offset))?;
        let mut buf = vec![0u8; request.length as usize];
        file.read_exact(&mut buf)?;
        self.counters.lock().record(start, request.length);
        Ok((
            Bytes::from(buf),
            ReadStats {
                bytes: request.length,
                ..ReadStats::default()
            },
        ))
    }

    fn snapshot_metrics(&self) -> StorageMetrics {
        self.counters.lock().snapshot()
    }

    fn reset_metrics(&self) {
        *self.counters.lock() = WallCounters::default();
    }
}
