//! Workload reports and their JSONL / CSV serializations.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{recall_of, RunOutcome, Workload, WorkloadSpec};
use crate::cache::{CacheStats, SegmentCache};
use crate::costmodel::IndexFamily;
use crate::search::ComputeModel;
use crate::storage::{ClockMode, ObjectStore, StorageMetrics};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const DECIMALS: i32 = 6;

/// Storage and cache settings a run was made under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// Median TTFB in seconds; absent for non-simulated backends.
    pub ttfb: Option<f64>,
    pub ttfb_dispersion: Option<f64>,
    pub bandwidth_bytes_per_sec: Option<f64>,
    pub get_rate_limit: Option<f64>,
    pub token_burst: Option<u32>,
    pub storage_seed: Option<u64>,
    pub cache_enabled: bool,
    pub cache_capacity_bytes: u64,
    pub compute: ComputeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub latency: f64,
    pub recall: f64,
    pub roundtrips: u32,
    pub requests: u64,
    pub bytes_read: u64,
    pub posting_lists_visited: u32,
    pub expansions: u32,
    pub vectors_scored: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub round_hits: Vec<bool>,
    pub io_wait: f64,
    pub queue_wait: f64,
    pub compute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub schema_version: u32,
    pub family: IndexFamily,
    pub index_id: String,
    pub param_name: String,
    pub param_value: usize,
    /// Graph only.
    pub beam_width: Option<usize>,
    pub k: usize,
    pub concurrency: usize,
    pub query_count: usize,
    pub completed: usize,
    pub seed: u64,
    pub mode: ClockMode,
    pub backend: String,
    pub valid: bool,
    pub error: Option<String>,
    /// Seconds from first admission to last completion.
    pub elapsed: f64,
    pub qps: f64,
    pub mean_recall: f64,
    pub latency_mean: f64,
    pub latency_p50: f64,
    pub latency_p95: f64,
    pub latency_p99: f64,
    pub mean_roundtrips: f64,
    pub mean_requests: f64,
    pub mean_bytes_read: f64,
    pub gets: u64,
    pub bytes_read: u64,
    pub bandwidth: f64,
    pub get_rate: f64,
    pub io_latency: f64,
    pub io_latency_excl_queue: f64,
    pub cache: CacheStats,
    pub cache_hit_rate: f64,
    pub max_in_flight: usize,
    pub environment: Environment,
    pub queries: Vec<QueryRecord>,
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub(super) fn assemble(
    workload: &Workload<'_>,
    spec: &WorkloadSpec,
    mode: ClockMode,
    store: &dyn ObjectStore,
    cache: &SegmentCache,
    mut outcome: RunOutcome,
    metrics: StorageMetrics,
) -> WorkloadReport {
    outcome.finished.sort_by_key(|f| f.query);
    let queries: Vec<QueryRecord> = outcome
        .finished
        .iter()
        .map(|f| QueryRecord {
            query: f.query,
            latency: f.stats.latency.as_secs_f64(),
            recall: recall_of(f, workload.truth, spec.k),
            roundtrips: f.stats.roundtrips,
            requests: f.stats.requests,
            bytes_read: f.stats.bytes_read,
            posting_lists_visited: f.stats.posting_lists_visited,
            expansions: f.stats.expansions,
            vectors_scored: f.stats.vectors_scored,
            cache_hits: f.stats.cache_hits,
            cache_misses: f.stats.cache_misses,
            round_hits: f.stats.round_hit_flags(),
            io_wait: f.stats.io_wait.as_secs_f64(),
            queue_wait: f.stats.queue_wait.as_secs_f64(),
            compute: f.stats.compute.as_secs_f64(),
        })
        .collect();
    let mut lat: Vec<f64> = queries.iter().map(|q| q.latency).collect();
    lat.sort_by(f64::total_cmp);
    let elapsed = outcome.elapsed;
    let per_sec = |x: f64| if elapsed > 0.0 { x / elapsed } else { 0.0 };
    let profile = store.as_simulated().map(|s| s.with_engine(|e| e.profile().clone()));
    let cache_stats = cache.stats();
    let family = workload.index.family();
    WorkloadReport {
        schema_version: SCHEMA_VERSION,
        family,
        index_id: workload.index.index_id().to_string(),
        param_name: workload.index.param_name().to_string(),
        param_value: spec.value,
        beam_width: (family == IndexFamily::Graph).then_some(spec.beam_width),
        k: spec.k,
        concurrency: spec.concurrency,
        query_count: workload.queries.count(),
        completed: queries.len(),
        seed: spec.seed,
        mode,
        backend: store.backend_name().to_string(),
        valid: outcome.error.is_none(),
        error: outcome.error,
        elapsed,
        qps: per_sec(queries.len() as f64),
        mean_recall: mean(queries.iter().map(|q| q.recall)),
        latency_mean: mean(lat.iter().copied()),
        latency_p50: percentile(&lat, 50.0),
        latency_p95: percentile(&lat, 95.0),
        latency_p99: percentile(&lat, 99.0),
        mean_roundtrips: mean(queries.iter().map(|q| q.roundtrips as f64)),
        mean_requests: mean(queries.iter().map(|q| q.requests as f64)),
        mean_bytes_read: mean(queries.iter().map(|q| q.bytes_read as f64)),
        gets: metrics.gets,
        bytes_read: metrics.bytes,
        bandwidth: per_sec(metrics.bytes as f64),
        get_rate: per_sec(metrics.gets as f64),
        io_latency: metrics.mean_latency.as_secs_f64(),
        io_latency_excl_queue: metrics.mean_latency_excl_queue.as_secs_f64(),
        cache_hit_rate: cache_stats.hit_rate(),
        cache: cache_stats,
        max_in_flight: outcome.max_in_flight,
        environment: Environment {
            ttfb: profile.as_ref().map(|p| p.ttfb_p50.as_secs_f64()),
            ttfb_dispersion: profile.as_ref().map(|p| p.ttfb_dispersion),
            bandwidth_bytes_per_sec: profile.as_ref().map(|p| p.bandwidth_bytes_per_sec),
            get_rate_limit: profile.as_ref().map(|p| p.get_rate_limit),
            token_burst: profile.as_ref().map(|p| p.token_burst),
            storage_seed: profile.as_ref().map(|p| p.seed),
            cache_enabled: cache.is_enabled(),
            cache_capacity_bytes: cache.capacity(),
            compute: spec.compute,
        },
        queries,
    }
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64");
            let scale = 10f64.powi(DECIMALS);
            if let Some(r) = serde_json::Number::from_f64((x * scale).round() / scale) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

impl WorkloadReport {
    /// The report as written to JSONL: floats rounded to six decimals.
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_floats(&mut v);
        v
    }

    /// The report after a JSONL round trip.
    pub fn rounded(&self) -> WorkloadReport {
        serde_json::from_value(self.to_json()).expect("report deserializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Jsonl,
    Csv,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Jsonl,
        }
    }
}

const CSV_COLUMNS: [&str; 22] = [
    "family",
    "index_id",
    "param_name",
    "param_value",
    "beam_width",
    "k",
    "concurrency",
    "query_count",
    "completed",
    "mode",
    "backend",
    "valid",
    "elapsed",
    "qps",
    "mean_recall",
    "latency_p50",
    "latency_p95",
    "latency_p99",
    "mean_roundtrips",
    "mean_requests",
    "mean_bytes_read",
    "cache_hit_rate",
];

fn csv_row(r: &WorkloadReport) -> Vec<String> {
    let f = |x: f64| format!("{x:.6}");
    vec![
        r.family.to_string(),
        r.index_id.clone(),
        r.param_name.clone(),
        r.param_value.to_string(),
        r.beam_width.map(|w| w.to_string()).unwrap_or_default(),
        r.k.to_string(),
        r.concurrency.to_string(),
        r.query_count.to_string(),
        r.completed.to_string(),
        serde_json::to_value(r.mode).expect("mode").as_str().unwrap_or_default().to_string(),
        r.backend.clone(),
        r.valid.to_string(),
        f(r.elapsed),
        f(r.qps),
        f(r.mean_recall),
        f(r.latency_p50),
        f(r.latency_p95),
        f(r.latency_p99),
        f(r.mean_roundtrips),
        f(r.mean_requests),
        f(r.mean_bytes_read),
        f(r.cache_hit_rate),
    ]
}

/// Writes reports as JSONL (a header line, then one report per line) or as
/// a CSV summary table. An empty list yields just the header.
pub fn emit_report(reports: &[WorkloadReport], out: impl Write, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Jsonl => {
            let mut out = std::io::BufWriter::new(out);
            let header = serde_json::json!({ "schema_version": SCHEMA_VERSION, "reports": reports.len() });
            writeln!(out, "{header}")?;
            for r in reports {
                writeln!(out, "{}", r.to_json())?;
            }
            out.flush()?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS).map_err(csv_err)?;
            for r in reports {
                w.write_record(csv_row(r)).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Reads back a JSONL report file.
pub fn parse_jsonl(input: impl BufRead) -> Result<Vec<WorkloadReport>> {
    let mut lines = input.lines();
    let header: Value = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::format("report", "missing header line")),
    };
    if header.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION as u64) {
        return Err(Error::format("report", "unsupported schema version"));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads back a CSV summary as string rows keyed by column.
pub fn parse_csv(input: impl std::io::Read) -> Result<Vec<Vec<(String, String)>>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::format("csv", "unexpected columns"));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub param_value: usize,
    pub recall: f64,
    pub qps: f64,
}

/// One recall-QPS curve: a fixed index and concurrency across the swept
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub family: IndexFamily,
    pub index_id: String,
    pub beam_width: Option<usize>,
    pub concurrency: usize,
    pub points: Vec<CurvePoint>,
}

pub fn curves(reports: &[WorkloadReport]) -> Vec<Curve> {
    let mut out: Vec<Curve> = Vec::new();
    for r in reports.iter().filter(|r| r.valid) {
        let pos = out.iter().position(|c| {
            c.index_id == r.index_id && c.concurrency == r.concurrency && c.beam_width == r.beam_width
        });
        let curve = match pos {
            Some(i) => &mut out[i],
            None => {
                out.push(Curve {
                    family: r.family,
                    index_id: r.index_id.clone(),
                    beam_width: r.beam_width,
                    concurrency: r.concurrency,
                    points: Vec::new(),
                });
                out.last_mut().expect("pushed")
            }
        };
        curve.points.push(CurvePoint {
            param_value: r.param_value,
            recall: r.mean_recall,
            qps: r.qps,
        });
    }
    for c in &mut out {
        c.points.sort_by_key(|p| p.param_value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), 50.0);
        assert_eq!(percentile(&xs, 95.0), 95.0);
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0), 2.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn rounding_keeps_six_decimals() {
        let mut v = serde_json::json!({ "a": 0.123_456_789, "b": [1.000_000_4], "c": 3 });
        round_floats(&mut v);
        assert_eq!(v["a"].as_f64(), Some(0.123457));
        assert_eq!(v["b"][0].as_f64(), Some(1.0));
        assert_eq!(v["c"].as_u64(), Some(3));
    }

    #[test]
    fn empty_lists_write_headers_only() {
        let mut buf = Vec::new();
        emit_report(&[], &mut buf, ReportFormat::Jsonl).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 1);
        assert!(parse_jsonl(&buf[..]).unwrap().is_empty());
        let mut buf = Vec::new();
        emit_report(&[], &mut buf, ReportFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 1);
        assert!(parse_csv(&buf[..]).unwrap().is_empty());
    }
}
