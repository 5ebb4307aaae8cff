//! TOML run configuration. Every command-line flag has a key here; flags
//! win over the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::CacheConfig;
use crate::cluster::ClusterBuildParams;
use crate::costmodel::{AdvisorConfig, EnvParams};
use crate::graph::GraphBuildParams;
use crate::search::ComputeModel;
use crate::storage::{ClockMode, StorageProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mem,
    File,
    #[default]
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    pub backend: BackendKind,
    pub mode: ClockMode,
    /// Object root for the file backend.
    pub root: Option<PathBuf>,
    pub ttfb_ms: f64,
    pub ttfb_dispersion: f64,
    pub bandwidth_bytes_per_sec: f64,
    pub get_rate_limit: f64,
    pub token_burst: u32,
    pub seed: u64,
}

impl Default for StorageSection {
    fn default() -> Self {
        let p = StorageProfile::default();
        StorageSection {
            backend: BackendKind::default(),
            mode: ClockMode::Virtual,
            root: None,
            ttfb_ms: p.ttfb_p50.as_secs_f64() * 1e3,
            ttfb_dispersion: p.ttfb_dispersion,
            bandwidth_bytes_per_sec: p.bandwidth_bytes_per_sec,
            get_rate_limit: p.get_rate_limit,
            token_burst: p.token_burst,
            seed: p.seed,
        }
    }
}

impl StorageSection {
    pub fn profile(&self) -> Result<StorageProfile> {
        if !(self.ttfb_ms.is_finite() && self.ttfb_ms >= 0.0) {
            return Err(Error::Config(format!("storage.ttfb_ms must be >= 0, got {}", self.ttfb_ms)));
        }
        let p = StorageProfile {
            ttfb_p50: Duration::from_secs_f64(self.ttfb_ms / 1e3),
            ttfb_dispersion: self.ttfb_dispersion,
            bandwidth_bytes_per_sec: self.bandwidth_bytes_per_sec,
            get_rate_limit: self.get_rate_limit,
            token_burst: self.token_burst,
            seed: self.seed,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub k: usize,
    pub concurrency: usize,
    /// nprobe or search_len; the family default applies when absent.
    pub value: Option<usize>,
    pub beam_width: usize,
    pub compute: ComputeModel,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            k: 10,
            concurrency: 1,
            value: None,
            beam_width: 4,
            compute: ComputeModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Swept values; the family default grid applies when absent.
    pub values: Option<Vec<usize>>,
    pub concurrency: Vec<usize>,
    /// Recall above which larger values are skipped; negative disables.
    pub early_stop: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            values: None,
            concurrency: vec![1, 4, 16, 64],
            early_stop: 0.995,
        }
    }
}

/// Cost-model coefficients live in `[cost]`, advisor thresholds in
/// `[advisor]`.
pub type CostSection = EnvParams;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub storage: StorageSection,
    pub cache: CacheConfig,
    pub cluster: ClusterBuildParams,
    pub graph: GraphBuildParams,
    pub bench: BenchSection,
    pub sweep: SweepSection,
    pub cost: CostSection,
    pub advisor: AdvisorConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
