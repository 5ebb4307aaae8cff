//! Analytic single-query cost models, coefficient calibration and a
//! rule-based parameter advisor.
//!
//! Cluster search: `C = c_centroid(n, nprobe) + c_fetch(bytes) + l * dim * c_dist`,
//! with one TTFB for the parallel fetch wave.
//!
//! Graph search: `C = rt * (TTFB + bytes_per_round / bandwidth + K * dim * c_dist)`,
//! never below the roundtrip floor `rt * TTFB`.

use serde::{Deserialize, Serialize};

use crate::dataset::ElemType;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Time to first byte, seconds.
    pub ttfb: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// GET requests per second.
    pub get_rate_limit: f64,
    /// Seconds per (dimension x distance).
    pub c_dist: f64,
    /// Seconds per unit of centroid-tree work.
    pub c_centroid: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            ttfb: 0.031,
            bandwidth: 625e6,
            get_rate_limit: 20_000.0,
            c_dist: 0.5e-9,
            c_centroid: 0.5e-9,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.ttfb, self.bandwidth, self.get_rate_limit, self.c_dist, self.c_centroid]
            .iter()
            .all(|&x| x.is_finite() && x > 0.0);
        if !ok {
            return Err(Error::invalid("environment parameters must be positive"));
        }
        Ok(())
    }
}

/// Scaling of the centroid-tree term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BktScaling {
    /// `nprobe * log2(max(n, 2))`
    #[default]
    NprobeLogN,
    /// `n * log2(max(nprobe, 2))`
    NLogNprobe,
}

impl BktScaling {
    pub fn units(self, n: u64, nprobe: u64) -> f64 {
        match self {
            BktScaling::NprobeLogN => nprobe as f64 * (n.max(2) as f64).log2(),
            BktScaling::NLogNprobe => n as f64 * (nprobe.max(2) as f64).log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterCostInputs {
    /// Centroid count.
    pub n: u64,
    pub nprobe: u64,
    /// Vectors fetched and scored.
    pub l: u64,
    pub bytes_fetched: u64,
    pub dim: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphCostInputs {
    pub rt: f64,
    /// Out-degree bound.
    pub k: u64,
    pub bytes_per_round: f64,
    pub dim: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub centroid: f64,
    pub ttfb: f64,
    pub transfer: f64,
    pub compute: f64,
    pub total: f64,
    /// Irreducible latency: `rt * TTFB` for the graph model, TTFB for a
    /// non-empty cluster query.
    pub floor: f64,
}

pub fn cluster_cost(env: &EnvParams, input: &ClusterCostInputs, scaling: BktScaling) -> CostBreakdown {
    if input.nprobe == 0 {
        return CostBreakdown::default();
    }
    let centroid = env.c_centroid * scaling.units(input.n, input.nprobe);
    let ttfb = env.ttfb;
    let transfer = input.bytes_fetched as f64 / env.bandwidth;
    let compute = input.l as f64 * input.dim as f64 * env.c_dist;
    CostBreakdown {
        centroid,
        ttfb,
        transfer,
        compute,
        total: centroid + ttfb + transfer + compute,
        floor: ttfb,
    }
}

pub fn graph_cost(env: &EnvParams, input: &GraphCostInputs) -> CostBreakdown {
    let rt = input.rt.max(0.0);
    let ttfb = rt * env.ttfb;
    let transfer = rt * input.bytes_per_round / env.bandwidth;
    let compute = rt * input.k as f64 * input.dim as f64 * env.c_dist;
    CostBreakdown {
        centroid: 0.0,
        ttfb,
        transfer,
        compute,
        total: ttfb + transfer + compute,
        floor: ttfb,
    }
}

/// A measured single-query latency with the inputs that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Observation {
    Cluster { inputs: ClusterCostInputs, latency: f64 },
    Graph { inputs: GraphCostInputs, latency: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub env: EnvParams,
    /// `measured - predicted` per observation, seconds.
    pub residuals: Vec<f64>,
    pub max_relative_error: f64,
}

pub const MIN_POINTS_PER_FAMILY: usize = 3;

impl Observation {
    /// `(x_dist, x_centroid, fixed I/O seconds, measured)`: the model is
    /// `fixed + c_dist * x_dist + c_centroid * x_centroid`.
    fn design_row(&self, env: &EnvParams, scaling: BktScaling) -> [f64; 4] {
        match *self {
            Observation::Cluster { inputs, latency } => {
                let io = if inputs.nprobe == 0 {
                    0.0
                } else {
                    env.ttfb + inputs.bytes_fetched as f64 / env.bandwidth
                };
                let xc = if inputs.nprobe == 0 {
                    0.0
                } else {
                    scaling.units(inputs.n, inputs.nprobe)
                };
                [(inputs.l * inputs.dim) as f64, xc, io, latency]
            }
            Observation::Graph { inputs, latency } => {
                let io = inputs.rt * (env.ttfb + inputs.bytes_per_round / env.bandwidth);
                [inputs.rt * (inputs.k * inputs.dim) as f64, 0.0, io, latency]
            }
        }
    }

    pub fn predict(&self, env: &EnvParams, scaling: BktScaling) -> f64 {
        match self {
            Observation::Cluster { inputs, .. } => cluster_cost(env, inputs, scaling).total,
            Observation::Graph { inputs, .. } => graph_cost(env, inputs).total,
        }
    }

    pub fn measured(&self) -> f64 {
        match *self {
            Observation::Cluster { latency, .. } | Observation::Graph { latency, .. } => latency,
        }
    }
}

/// Least-squares fit of `c_dist` and `c_centroid`, holding TTFB and
/// bandwidth at `env`. Residuals are taken relative to each measured
/// latency. A coefficient with no support in the data keeps its value from
/// `env`.
pub fn calibrate(env: &EnvParams, observations: &[Observation], scaling: BktScaling) -> Result<Calibration> {
    let clusters = observations
        .iter()
        .filter(|o| matches!(o, Observation::Cluster { .. }))
        .count();
    let graphs = observations.len() - clusters;
    for (name, count) in [("cluster", clusters), ("graph", graphs)] {
        if count > 0 && count < MIN_POINTS_PER_FAMILY {
            return Err(Error::invalid(format!(
                "calibration needs at least {MIN_POINTS_PER_FAMILY} {name} points, got {count}"
            )));
        }
    }
    if observations.len() < MIN_POINTS_PER_FAMILY {
        return Err(Error::invalid("calibration needs at least 3 points"));
    }
    if observations.iter().any(|o| !(o.measured() > 0.0 && o.measured().is_finite())) {
        return Err(Error::invalid("measured latencies must be positive"));
    }
    // scaling each row by 1/measured turns the fit into relative least squares
    let rows: Vec<[f64; 4]> = observations
        .iter()
        .map(|o| o.design_row(env, scaling).map(|x| x / o.measured()))
        .collect();
    // normal equations over the columns with support
    let active: Vec<usize> = (0..2).filter(|&c| rows.iter().any(|r| r[c] != 0.0)).collect();
    let mut fitted = [env.c_dist, env.c_centroid];
    let target = |r: &[f64; 4]| {
        let mut y = r[3] - r[2];
        for c in 0..2 {
            if !active.contains(&c) {
                y -= fitted[c] * r[c];
            }
        }
        y
    };
    match active.as_slice() {
        [] => return Err(Error::RankDeficient("no compute term varies across points".into())),
        [c] => {
            let sxx: f64 = rows.iter().map(|r| r[*c] * r[*c]).sum();
            let sxy: f64 = rows.iter().map(|r| r[*c] * target(r)).sum();
            fitted[*c] = sxy / sxx;
        }
        _ => {
            let (mut a, mut b, mut d, mut e, mut f) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in &rows {
                let y = target(r);
                a += r[0] * r[0];
                b += r[0] * r[1];
                d += r[1] * r[1];
                e += r[0] * y;
                f += r[1] * y;
            }
            let det = a * d - b * b;
            if det.abs() <= 1e-12 * (a * d).abs() {
                return Err(Error::RankDeficient(
                    "compute terms are collinear across points".into(),
                ));
            }
            fitted = [(e * d - b * f) / det, (a * f - b * e) / det];
        }
    }
    let fitted_env = EnvParams {
        c_dist: fitted[0],
        c_centroid: fitted[1],
        ..*env
    };
    let residuals: Vec<f64> = observations
        .iter()
        .map(|o| o.measured() - o.predict(&fitted_env, scaling))
        .collect();
    let max_relative_error = observations
        .iter()
        .zip(&residuals)
        .map(|(o, r)| (r / o.measured()).abs())
        .fold(0.0, f64::max);
    Ok(Calibration {
        env: fitted_env,
        residuals,
        max_relative_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexFamily {
    Cluster,
    Graph,
}

impl std::fmt::Display for IndexFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexFamily::Cluster => "cluster",
            IndexFamily::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisorConfig {
    /// Graph is preferred above this recall target...
    pub recall_threshold: f64,
    /// ...or at or above this many concurrent queries.
    pub concurrency_threshold: u32,
    /// Recall target from which wider beams are considered.
    pub high_recall: f64,
    pub beam_tiers: Vec<u32>,
    pub low_beam: u32,
    pub centroid_pct_tiers: (f64, f64),
    pub degree_tiers: (u32, u32),
}

impl Default for AdvisorConfig {
    fn default() -> Self {
        AdvisorConfig {
            recall_threshold: 0.8,
            concurrency_threshold: 16,
            high_recall: 0.95,
            beam_tiers: vec![4, 8, 16, 32, 64],
            low_beam: 4,
            centroid_pct_tiers: (12.0, 16.0),
            degree_tiers: (64, 96),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub target_recall: f64,
    pub concurrency: u32,
    pub dim: usize,
    pub elem: ElemType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub family: IndexFamily,
    pub centroid_pct: f64,
    pub max_degree: u32,
    pub beam_width: u32,
    /// `concurrency * W / TTFB` for the chosen beam width.
    pub predicted_get_rate: f64,
    /// Set when a wider beam was rejected because it would exceed the GET limit.
    pub iops_limited: bool,
    pub notes: Vec<String>,
}

pub fn advise(env: &EnvParams, workload: &Workload, config: &AdvisorConfig) -> Recommendation {
    let demanding = workload.target_recall > config.recall_threshold
        || workload.concurrency >= config.concurrency_threshold;
    let family = if demanding {
        IndexFamily::Graph
    } else {
        IndexFamily::Cluster
    };
    let rate = |w: u32| workload.concurrency as f64 * w as f64 / env.ttfb;
    let mut notes = Vec::new();
    let mut iops_limited = false;
    let beam_width = if workload.target_recall >= config.high_recall {
        let fitting = config
            .beam_tiers
            .iter()
            .copied()
            .filter(|&w| rate(w) < env.get_rate_limit)
            .max();
        iops_limited = config.beam_tiers.iter().any(|&w| rate(w) >= env.get_rate_limit);
        match fitting {
            Some(w) => w,
            None => {
                notes.push("every beam tier exceeds the GET rate limit".into());
                config.beam_tiers.iter().copied().min().unwrap_or(config.low_beam)
            }
        }
    } else {
        config.low_beam
    };
    if iops_limited {
        notes.push(format!(
            "wider beams would exceed {:.0} GET/s at concurrency {}",
            env.get_rate_limit, workload.concurrency
        ));
    }
    let (pct, max_degree) = if demanding {
        (config.centroid_pct_tiers.1, config.degree_tiers.1)
    } else {
        (config.centroid_pct_tiers.0, config.degree_tiers.0)
    };
    Recommendation {
        family,
        centroid_pct: pct,
        max_degree,
        beam_width,
        predicted_get_rate: rate(beam_width),
        iops_limited,
        notes,
    }
}
