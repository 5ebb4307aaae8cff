//! Vector search over modeled object storage.
//!
//! The crate bundles two disk/cloud-resident index families (a clustered
//! posting-list index and a sector-packed proximity graph), a deterministic
//! object-store simulator, an SLRU segment cache, analytic search-cost
//! models, and a workload harness that measures QPS against recall.

pub mod bench;
pub mod cache;
pub mod cli;
pub mod cluster;
pub mod costmodel;
pub mod dataset;
mod error;
pub mod graph;
pub mod kmeans;
pub mod par;
pub mod search;
pub mod storage;
pub mod synthetic;

pub use error::{Error, Result};
