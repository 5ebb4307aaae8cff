//! Byte-capacity segmented LRU (SLRU) cache for index segments.
//!
//! New entries land at the head of the probationary list. A hit on a
//! probationary entry promotes it to the protected list; protected overflow
//! is demoted back to the probationary head. Evictions always come from the
//! probationary tail first, so a scan of one-touch segments cannot flush
//! entries that were referenced twice.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegmentKey {
    pub index_id: Arc<str>,
    /// Posting-list id or first sector number.
    pub segment_id: u64,
}

impl SegmentKey {
    pub fn new(index_id: Arc<str>, segment_id: u64) -> Self {
        SegmentKey {
            index_id,
            segment_id,
        }
    }
}

impl fmt::Display for SegmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.index_id, self.segment_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum List {
    Probation,
    Protected,
}

#[derive(Debug)]
struct Entry {
    data: Bytes,
    list: List,
    stamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted { evicted: Vec<SegmentKey> },
    /// The segment is larger than the whole cache and was not stored.
    Bypassed,
}

#[derive(Debug)]
pub struct SlruCache {
    capacity: u64,
    protected_cap: u64,
    entries: HashMap<SegmentKey, Entry>,
    probation: BTreeMap<u64, SegmentKey>,
    protected: BTreeMap<u64, SegmentKey>,
    probation_bytes: u64,
    protected_bytes: u64,
    clock: u64,
}

impl SlruCache {
    pub fn new(capacity_bytes: u64, protected_fraction: f64) -> Result<Self> {
        if capacity_bytes == 0 {
            return Err(Error::invalid("cache capacity must be positive"));
        }
        if !(protected_fraction > 0.0 && protected_fraction < 1.0) {
            return Err(Error::invalid("protected_fraction must lie in (0, 1)"));
        }
        Ok(SlruCache {
            capacity: capacity_bytes,
            protected_cap: (capacity_bytes as f64 * protected_fraction).floor() as u64,
            entries: HashMap::new(),
            probation: BTreeMap::new(),
            protected: BTreeMap::new(),
            probation_bytes: 0,
            protected_bytes: 0,
            clock: 0,
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn protected_capacity(&self) -> u64 {
        self.protected_cap
    }

    pub fn used_bytes(&self) -> u64 {
        self.probation_bytes + self.protected_bytes
    }

    pub fn protected_bytes(&self) -> u64 {
        self.protected_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &SegmentKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_protected(&self, key: &SegmentKey) -> bool {
        self.entries
            .get(key)
            .is_some_and(|e| e.list == List::Protected)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn unlink(&mut self, key: &SegmentKey) -> Option<Entry> {
        let e = self.entries.remove(key)?;
        let size = e.data.len() as u64;
        match e.list {
            List::Probation => {
                self.probation.remove(&e.stamp);
                self.probation_bytes -= size;
            }
            List::Protected => {
                self.protected.remove(&e.stamp);
                self.protected_bytes -= size;
            }
        }
        Some(e)
    }

    fn link(&mut self, key: SegmentKey, data: Bytes, list: List) {
        let stamp = self.tick();
        let size = data.len() as u64;
        match list {
            List::Probation => {
                self.probation.insert(stamp, key.clone());
                self.probation_bytes += size;
            }
            List::Protected => {
                self.protected.insert(stamp, key.clone());
                self.protected_bytes += size;
            }
        }
        self.entries.insert(key, Entry { data, list, stamp });
    }

    /// Returns the cached bytes and updates recency; misses change nothing.
    pub fn lookup(&mut self, key: &SegmentKey) -> Option<Bytes> {
        let list = self.entries.get(key)?.list;
        let e = self.unlink(key).expect("present");
        let data = e.data.clone();
        if list == List::Probation && e.data.len() as u64 > self.protected_cap {
            // too large for the protected segment; refresh in place
            self.link(key.clone(), e.data, List::Probation);
            return Some(data);
        }
        self.link(key.clone(), e.data, List::Protected);
        while self.protected_bytes > self.protected_cap {
            let (_, victim) = self.protected.pop_first().expect("non-empty");
            let ve = self.entries.remove(&victim).expect("linked");
            self.protected_bytes -= ve.data.len() as u64;
            self.link(victim, ve.data, List::Probation);
        }
        Some(data)
    }

    pub fn insert(&mut self, key: SegmentKey, data: Bytes) -> InsertOutcome {
        let size = data.len() as u64;
        if size > self.capacity {
            return InsertOutcome::Bypassed;
        }
        self.unlink(&key);
        self.link(key.clone(), data, List::Probation);
        let mut evicted = Vec::new();
        while self.used_bytes() > self.capacity {
            let victim = self
                .probation
                .values()
                .find(|k| **k != key)
                .or_else(|| self.protected.values().next())
                .cloned()
                .expect("capacity admits the new entry");
            self.unlink(&victim);
            evicted.push(victim);
        }
        InsertOutcome::Inserted { evicted }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.probation.clear();
        self.protected.clear();
        self.probation_bytes = 0;
        self.protected_bytes = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    pub capacity_bytes: u64,
    pub protected_fraction: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: false,
            capacity_bytes: 64 << 20,
            protected_fraction: 0.8,
        }
    }
}

impl CacheConfig {
    pub fn with_capacity(capacity_bytes: u64) -> Self {
        CacheConfig {
            enabled: true,
            capacity_bytes,
            ..CacheConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_hit: u64,
    pub bytes_fetched: u64,
    pub bypassed: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }
}

/// Thread-safe cache front used by the search engine. A disabled cache
/// misses every lookup and never stores anything.
#[derive(Debug)]
pub struct SegmentCache {
    slru: Option<Mutex<SlruCache>>,
    stats: Mutex<CacheStats>,
}

impl SegmentCache {
    pub fn new(config: &CacheConfig) -> Result<Self> {
        let slru = if config.enabled {
            Some(Mutex::new(SlruCache::new(
                config.capacity_bytes,
                config.protected_fraction,
            )?))
        } else {
            None
        };
        Ok(SegmentCache {
            slru,
            stats: Mutex::default(),
        })
    }

    pub fn disabled() -> Self {
        SegmentCache {
            slru: None,
            stats: Mutex::default(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.slru.is_some()
    }

    /// Capacity in bytes; 0 when disabled.
    pub fn capacity(&self) -> u64 {
        self.slru.as_ref().map_or(0, |c| c.lock().capacity())
    }

    pub fn lookup(&self, key: &SegmentKey) -> Option<Bytes> {
        let hit = self.slru.as_ref().and_then(|c| c.lock().lookup(key));
        let mut s = self.stats.lock();
        s.lookups += 1;
        match &hit {
            Some(b) => {
                s.hits += 1;
                s.bytes_hit += b.len() as u64;
            }
            None => s.misses += 1,
        }
        hit
    }

    /// Stores a fetched segment. Counts the fetched bytes either way.
    pub fn insert(&self, key: SegmentKey, data: Bytes) -> InsertOutcome {
        let len = data.len() as u64;
        let outcome = match &self.slru {
            Some(c) => c.lock().insert(key, data),
            None => InsertOutcome::Bypassed,
        };
        let mut s = self.stats.lock();
        s.bytes_fetched += len;
        if outcome == InsertOutcome::Bypassed && self.slru.is_some() {
            s.bypassed += 1;
        }
        outcome
    }

    /// Serves `key` from the cache, or fetches, stores and returns it. The
    /// flag is true on a hit. Failed fetches insert nothing.
    pub fn read_through<F>(&self, key: &SegmentKey, fetch: F) -> Result<(Bytes, bool)>
    where
        F: FnOnce() -> Result<Bytes>,
    {
        if let Some(b) = self.lookup(key) {
            return Ok((b, true));
        }
        let data = fetch()?;
        self.insert(key.clone(), data.clone());
        Ok((data, false))
    }

    /// Stores a segment without touching the counters (cache pre-warming).
    pub fn warm(&self, key: SegmentKey, data: Bytes) {
        if let Some(c) = &self.slru {
            c.lock().insert(key, data);
        }
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock()
    }

    pub fn reset_stats(&self) {
        *self.stats.lock() = CacheStats::default();
    }

    pub fn used_bytes(&self) -> u64 {
        self.slru.as_ref().map_or(0, |c| c.lock().used_bytes())
    }

    pub fn contains(&self, key: &SegmentKey) -> bool {
        self.slru.as_ref().is_some_and(|c| c.lock().contains(key))
    }
}
