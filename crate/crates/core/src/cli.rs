//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    emit_report, sweep, BackendKind, BenchIndex, Config, Harness, ReportFormat, SweepSpec, Workload, WorkloadReport,
    WorkloadSpec,
};
use crate::cache::{CacheConfig, SegmentCache};
use crate::cluster::{build_cluster_index, ClusterIndex};
use crate::costmodel::{
    advise, calibrate, cluster_cost, graph_cost, BktScaling, ClusterCostInputs, CostBreakdown, GraphCostInputs,
    Observation, Workload as AdvisorWorkload,
};
use crate::dataset::{brute_force_topk, load_vectors, write_vectors, ElemType, GroundTruth, VecFormat, VectorDataset};
use crate::graph::{build_graph_index, GraphIndex};
use crate::search::ComputeModel;
use crate::storage::{ClockMode, FileStore, MemoryStore, ObjectStore, ReadRequest};
use crate::synthetic::{quantize_i8, GaussianMixture};

#[derive(Debug, Parser)]
#[command(name = "cloudann", version, about = "Vector indexes over modeled object storage", arg_required_else_help = true)]
pub struct Cli {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub storage: Option<StorageArg>,
    /// Enables the segment cache with this capacity.
    #[arg(long, global = true)]
    pub cache_bytes: Option<u64>,
    /// Output path; `.csv` selects the summary table, anything else JSONL.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StorageArg {
    Mem,
    File,
    Sim,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComputeArg {
    Modeled,
    Measured,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a seeded Gaussian-mixture base set and query set.
    GenSynthetic(GenArgs),
    /// Exact top-k for a query set by brute force.
    GroundTruth(TruthArgs),
    /// Builds a clustered posting-list index.
    BuildCluster(BuildClusterArgs),
    /// Builds a sector-packed proximity graph index.
    BuildGraph(BuildGraphArgs),
    /// Runs one workload cell.
    Bench(BenchArgs),
    /// Runs a (value, concurrency) grid.
    Sweep(SweepArgs),
    /// Evaluates, calibrates or applies the analytic cost model.
    Cost(CostArgs),
    /// Repeats a workload with the cache retained and reports hit rates.
    CacheStats(CacheStatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f32,
    /// Quantize to int8 with this scale.
    #[arg(long)]
    pub int8_scale: Option<f32>,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long = "query-file")]
    pub query_file: PathBuf,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct BuildClusterArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Directory receiving index metadata and objects.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "cluster")]
    pub id: String,
    #[arg(long)]
    pub centroid_pct: Option<f64>,
    #[arg(long)]
    pub num_replica: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "graph")]
    pub id: String,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub l_build: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub sector_len: Option<usize>,
    #[arg(long)]
    pub pq_chunks: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WorkloadArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub queries: PathBuf,
    /// Ground truth written by `ground-truth`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, value_enum)]
    pub compute: Option<ComputeArg>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    /// nprobe (cluster) or search_len (graph).
    #[arg(long)]
    pub value: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub concurrency: Option<Vec<usize>>,
    /// Recall threshold for early stopping; negative disables.
    #[arg(long, allow_negative_numbers = true)]
    pub early_stop: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CacheStatsArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long)]
    pub value: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub ttfb: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub get_rate_limit: Option<f64>,
    #[arg(long)]
    pub c_dist: Option<f64>,
    #[arg(long)]
    pub c_centroid: Option<f64>,
    /// Use the literal `n * log2(nprobe)` centroid-search term.
    #[arg(long)]
    pub literal_bkt: bool,
    #[command(subcommand)]
    pub what: CostCommand,
}

#[derive(Debug, Subcommand)]
pub enum CostCommand {
    Cluster {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        nprobe: u64,
        #[arg(long)]
        l: u64,
        #[arg(long)]
        bytes: u64,
        #[arg(long)]
        dim: u64,
    },
    Graph {
        #[arg(long)]
        rt: f64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        bytes_per_round: f64,
        #[arg(long)]
        dim: u64,
    },
    /// Fits coefficients to observations (JSONL, one per line).
    Calibrate {
        #[arg(long)]
        observations: PathBuf,
    },
    Advise {
        #[arg(long)]
        recall: f64,
        #[arg(long)]
        concurrency: u32,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value = "f32")]
        elem: String,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    apply_globals(&cli, &mut cfg);
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a, &cfg),
        Command::GroundTruth(a) => ground_truth(a, &cfg),
        Command::BuildCluster(a) => build_cluster(a, &mut cfg),
        Command::BuildGraph(a) => build_graph(a, &mut cfg),
        Command::Bench(a) => bench(a, &cfg),
        Command::Sweep(a) => run_sweep(a, &cfg),
        Command::Cost(a) => cost(a, &cfg),
        Command::CacheStats(a) => cache_stats(a, &cfg),
    }
}

fn apply_globals(cli: &Cli, cfg: &mut Config) {
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = cfg.seed {
        cfg.cluster.seed = s;
        cfg.graph.seed = s;
        cfg.storage.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.storage.mode = match m {
            ModeArg::Virtual => ClockMode::Virtual,
            ModeArg::Wall => ClockMode::Wall,
        };
    }
    if let Some(s) = cli.storage {
        cfg.storage.backend = match s {
            StorageArg::Mem => BackendKind::Mem,
            StorageArg::File => BackendKind::File,
            StorageArg::Sim => BackendKind::Sim,
        };
    }
    if let Some(b) = cli.cache_bytes {
        cfg.cache = CacheConfig {
            enabled: b > 0,
            capacity_bytes: b,
            ..cfg.cache.clone()
        };
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
}

fn load(path: &Path) -> anyhow::Result<VectorDataset> {
    let format = VecFormat::from_path(path).with_context(|| format!("unknown vector format for {}", path.display()))?;
    Ok(load_vectors(path, format).with_context(|| format!("loading {}", path.display()))?)
}

fn save(ds: &VectorDataset, path: &Path) -> anyhow::Result<()> {
    let format = VecFormat::from_path(path).with_context(|| format!("unknown vector format for {}", path.display()))?;
    Ok(write_vectors(ds, path, format)?)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn gen_synthetic(a: &GenArgs, cfg: &Config) -> anyhow::Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let mix = GaussianMixture::new(a.dim, a.clusters, a.spread, seed);
    let mut base = mix.sample(a.count, seed.wrapping_add(1));
    let mut queries = mix.sample(a.queries, seed.wrapping_add(2));
    if let Some(scale) = a.int8_scale {
        base = quantize_i8(&base, scale);
        queries = quantize_i8(&queries, scale);
    }
    save(&base, &a.base)?;
    save(&queries, &a.query_file)
}

fn ground_truth(a: &TruthArgs, cfg: &Config) -> anyhow::Result<()> {
    let out = cfg.out.as_ref().context("ground-truth needs --out")?;
    let gt = brute_force_topk(&load(&a.base)?, &load(&a.queries)?, a.k)?;
    Ok(gt.save(out)?)
}

fn build_cluster(a: &BuildClusterArgs, cfg: &mut Config) -> anyhow::Result<()> {
    let p = &mut cfg.cluster;
    if let Some(v) = a.centroid_pct {
        p.centroid_pct = v;
    }
    if let Some(v) = a.num_replica {
        p.num_replica = v;
    }
    if let Some(v) = a.epsilon {
        p.epsilon = v;
    }
    let built = build_cluster_index(&load(&a.base)?, p, &a.id)?;
    built.save(&a.root)?;
    print_json(&built.index.stats())
}

fn build_graph(a: &BuildGraphArgs, cfg: &mut Config) -> anyhow::Result<()> {
    let p = &mut cfg.graph;
    if let Some(v) = a.r {
        p.r = v;
    }
    if let Some(v) = a.l_build {
        p.l_build = v;
    }
    if let Some(v) = a.alpha {
        p.alpha = v;
    }
    if let Some(v) = a.sector_len {
        p.sector_len = v;
    }
    if a.pq_chunks.is_some() {
        p.pq_chunks = a.pq_chunks;
    }
    let built = build_graph_index(&load(&a.base)?, p, &a.id)?;
    built.save(&a.root)?;
    print_json(&built.index.stats())
}

/// An index read back from disk.
pub enum LoadedIndex {
    Cluster(ClusterIndex),
    Graph(GraphIndex),
}

impl LoadedIndex {
    pub fn load(root: &Path, id: &str) -> anyhow::Result<LoadedIndex> {
        let manifest: serde_json::Value = serde_json::from_slice(
            &std::fs::read(root.join(id).join("manifest.json")).with_context(|| format!("no index `{id}` under {}", root.display()))?,
        )?;
        match manifest.get("kind").and_then(|k| k.as_str()) {
            Some("cluster") => Ok(LoadedIndex::Cluster(ClusterIndex::load(root, id)?)),
            Some("graph") => Ok(LoadedIndex::Graph(GraphIndex::load(root, id)?)),
            other => bail!("unknown index kind {other:?}"),
        }
    }

    pub fn as_bench(&self) -> BenchIndex<'_> {
        match self {
            LoadedIndex::Cluster(c) => BenchIndex::Cluster(c),
            LoadedIndex::Graph(g) => BenchIndex::Graph(g),
        }
    }

    /// Object keys holding the index's fetchable data.
    pub fn object_keys(&self) -> Vec<String> {
        match self {
            LoadedIndex::Cluster(c) => c.postings().iter().map(|p| p.key.clone()).collect(),
            LoadedIndex::Graph(g) => vec![g.data_key()],
        }
    }
}

fn harness(cfg: &Config, index: &LoadedIndex, root: &Path) -> anyhow::Result<Harness> {
    let objects = MemoryStore::new();
    let backend = match cfg.storage.backend {
        BackendKind::File => crate::bench::Backend::File(cfg.storage.root.clone().unwrap_or_else(|| root.to_path_buf())),
        kind => {
            let files = FileStore::new(root);
            for key in index.object_keys() {
                let len = files.object_len(&key)?;
                objects.put(key.clone(), files.get(&ReadRequest::new(key, 0, len))?.0);
            }
            match kind {
                BackendKind::Mem => crate::bench::Backend::Memory,
                _ => crate::bench::Backend::Simulated {
                    profile: cfg.storage.profile()?,
                    mode: cfg.storage.mode,
                },
            }
        }
    };
    Ok(Harness {
        objects,
        backend,
        cache: cfg.cache.clone(),
    })
}

struct Loaded {
    index: LoadedIndex,
    queries: VectorDataset,
    truth: GroundTruth,
}

fn load_workload(a: &WorkloadArgs) -> anyhow::Result<Loaded> {
    Ok(Loaded {
        index: LoadedIndex::load(&a.root, &a.id)?,
        queries: load(&a.queries)?,
        truth: GroundTruth::load(&a.truth)?,
    })
}

fn base_spec(a: &WorkloadArgs, cfg: &Config) -> WorkloadSpec {
    WorkloadSpec {
        value: cfg.bench.value.unwrap_or(16),
        beam_width: a.beam_width.unwrap_or(cfg.bench.beam_width),
        k: a.k.unwrap_or(cfg.bench.k),
        concurrency: cfg.bench.concurrency,
        compute: match a.compute {
            Some(ComputeArg::Measured) => ComputeModel::Measured,
            Some(ComputeArg::Modeled) => ComputeModel::default(),
            None => cfg.bench.compute,
        },
        mode: cfg.storage.mode,
        seed: cfg.seed.unwrap_or(0),
    }
}

fn write_reports(reports: &[WorkloadReport], cfg: &Config) -> anyhow::Result<()> {
    match &cfg.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            emit_report(reports, file, ReportFormat::from_path(path))?;
        }
        None => emit_report(reports, std::io::stdout().lock(), ReportFormat::Jsonl)?,
    }
    Ok(())
}

fn bench(a: &BenchArgs, cfg: &Config) -> anyhow::Result<()> {
    let l = load_workload(&a.workload)?;
    let h = harness(cfg, &l.index, &a.workload.root)?;
    let w = Workload {
        index: l.index.as_bench(),
        queries: &l.queries,
        truth: &l.truth,
    };
    let mut spec = base_spec(&a.workload, cfg);
    spec.value = a.value.or(cfg.bench.value).unwrap_or(spec.value);
    spec.concurrency = a.concurrency.unwrap_or(spec.concurrency);
    let report = h.run_cell(&w, &spec)?;
    write_reports(&[report], cfg)
}

fn run_sweep(a: &SweepArgs, cfg: &Config) -> anyhow::Result<()> {
    let l = load_workload(&a.workload)?;
    let h = harness(cfg, &l.index, &a.workload.root)?;
    let index = l.index.as_bench();
    let w = Workload {
        index,
        queries: &l.queries,
        truth: &l.truth,
    };
    let early = a.early_stop.unwrap_or(cfg.sweep.early_stop);
    let spec = SweepSpec {
        values: a
            .values
            .clone()
            .or_else(|| cfg.sweep.values.clone())
            .unwrap_or_else(|| index.default_values()),
        concurrencies: a.concurrency.clone().unwrap_or_else(|| cfg.sweep.concurrency.clone()),
        early_stop: (early >= 0.0).then_some(early),
    };
    let reports = sweep(&w, &spec, &base_spec(&a.workload, cfg), &h)?;
    write_reports(&reports, cfg)
}

fn cache_stats(a: &CacheStatsArgs, cfg: &Config) -> anyhow::Result<()> {
    let l = load_workload(&a.workload)?;
    let h = harness(cfg, &l.index, &a.workload.root)?;
    let w = Workload {
        index: l.index.as_bench(),
        queries: &l.queries,
        truth: &l.truth,
    };
    let mut spec = base_spec(&a.workload, cfg);
    spec.value = a.value.or(cfg.bench.value).unwrap_or(spec.value);
    spec.concurrency = a.concurrency.unwrap_or(spec.concurrency);
    let mut cache_cfg = cfg.cache.clone();
    cache_cfg.enabled = true;
    let cache = SegmentCache::new(&cache_cfg)?;
    let store = h.open_store()?;
    let mut rows = Vec::new();
    for run in 0..a.runs {
        let r = crate::bench::run_workload(&w, &spec, store.as_ref(), &cache)?;
        let depth = r.queries.iter().map(|q| q.round_hits.len()).max().unwrap_or(0);
        let per_round: Vec<f64> = (0..depth)
            .map(|i| {
                let (hit, n) = r.queries.iter().filter_map(|q| q.round_hits.get(i)).fold((0, 0), |(h, n), &x| (h + x as u32, n + 1));
                hit as f64 / n as f64
            })
            .collect();
        rows.push(serde_json::json!({
            "run": run,
            "cache": r.cache,
            "hit_rate": r.cache_hit_rate,
            "round_hit_rate": per_round,
            "gets": r.gets,
            "used_bytes": cache.used_bytes(),
            "capacity_bytes": cache.capacity(),
        }));
    }
    let text = serde_json::to_string_pretty(&rows)?;
    match &cfg.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

fn breakdown_table(out: &mut impl Write, b: &CostBreakdown) -> std::io::Result<()> {
    writeln!(out, "{:<10} {:>14}", "term", "seconds")?;
    for (name, v) in [
        ("centroid", b.centroid),
        ("ttfb", b.ttfb),
        ("transfer", b.transfer),
        ("compute", b.compute),
        ("total", b.total),
        ("floor", b.floor),
    ] {
        writeln!(out, "{name:<10} {v:>14.6}")?;
    }
    Ok(())
}

fn cost(a: &CostArgs, cfg: &Config) -> anyhow::Result<()> {
    let mut env = cfg.cost;
    if let Some(v) = a.ttfb {
        env.ttfb = v;
    }
    if let Some(v) = a.bandwidth {
        env.bandwidth = v;
    }
    if let Some(v) = a.get_rate_limit {
        env.get_rate_limit = v;
    }
    if let Some(v) = a.c_dist {
        env.c_dist = v;
    }
    if let Some(v) = a.c_centroid {
        env.c_centroid = v;
    }
    env.validate()?;
    let scaling = if a.literal_bkt { BktScaling::NLogNprobe } else { BktScaling::NprobeLogN };
    let mut out = std::io::stdout().lock();
    match &a.what {
        &CostCommand::Cluster { n, nprobe, l, bytes, dim } => {
            let input = ClusterCostInputs { n, nprobe, l, bytes_fetched: bytes, dim };
            breakdown_table(&mut out, &cluster_cost(&env, &input, scaling))?;
        }
        &CostCommand::Graph { rt, k, bytes_per_round, dim } => {
            let input = GraphCostInputs { rt, k, bytes_per_round, dim };
            breakdown_table(&mut out, &graph_cost(&env, &input))?;
        }
        CostCommand::Calibrate { observations } => {
            let reader = BufReader::new(File::open(observations)?);
            let mut obs: Vec<Observation> = Vec::new();
            for line in std::io::BufRead::lines(reader) {
                let line = line?;
                if !line.trim().is_empty() {
                    obs.push(serde_json::from_str(&line)?);
                }
            }
            let cal = calibrate(&env, &obs, scaling)?;
            print_json(&cal)?;
        }
        CostCommand::Advise { recall, concurrency, dim, elem } => {
            let elem = match elem.as_str() {
                "f32" | "float" => ElemType::F32,
                "i8" | "int8" => ElemType::I8,
                other => bail!("unknown element type `{other}`"),
            };
            let w = AdvisorWorkload {
                target_recall: *recall,
                concurrency: *concurrency,
                dim: *dim,
                elem,
            };
            print_json(&advise(&env, &w, &cfg.advisor))?;
        }
    }
    Ok(())
}
