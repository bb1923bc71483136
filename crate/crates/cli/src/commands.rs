//! The pipeline behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use adapter_cluster::baseline::{default_top_k, features_flat, features_svd, kmeans, KMeansOptions};
use adapter_cluster::metrics::{inverse_purity, purity};
use adapter_cluster::oracle::{synthetic_generate, ExternalOracle, LossOracle, SyntheticTaskModel};
use adapter_cluster::partition::{dirichlet_partition, random_partition, PartitionManifest, PartitionMap, StorageReport};
use adapter_cluster::search::{d2c_run, evaluate_partition, merge_members, SearchConfig, SearchTrace};
use adapter_cluster::tensor_store::{read_adapter_set, read_index, write_adapter, write_adapter_set, AdapterSet, INDEX_FILE};
use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ClusterMethod, ConfigError, OracleKind, RunConfig};

pub const CONFIG_COPY: &str = "run_config.txt";
pub const PARTITION_FILE: &str = "partition.txt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSONL: &str = "report.jsonl";
pub const SWEEP_TABLE: &str = "sweep.tsv";
pub const SWEEP_CELLS: &str = "sweep_cells.jsonl";
pub const SWEEP_REPORT: &str = "sweep_report.jsonl";
pub const MODEL_DIR: &str = "model";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn create_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.require_out()?.to_path_buf();
    fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    fs::write(out.join(CONFIG_COPY), cfg.to_text()).with_context(|| format!("cannot write to {}", out.display()))?;
    Ok(out)
}

fn load_set(cfg: &RunConfig) -> Result<AdapterSet> {
    let dir = cfg.require_adapters()?;
    Ok(read_adapter_set(dir).with_context(|| format!("cannot load adapter set {}", dir.display()))?)
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub out: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Writes a synthetic fleet (adapters, index and task model) to `out`.
pub fn gen_synthetic(cfg: &RunConfig) -> Result<GenSummary> {
    let spec = &cfg.synthetic;
    if spec.adapters == 0 {
        return Err(CliError::Usage("num_adapters must be at least 1".into()));
    }
    if spec.groups == 0 || spec.groups > spec.adapters {
        return Err(CliError::Usage(format!(
            "groups must be in 1..={}, got {}",
            spec.adapters, spec.groups
        )));
    }
    let out = cfg.require_out()?.to_path_buf();
    let (set, model) = synthetic_generate(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let files = write_adapter_set(&set, &out).context("writing adapters")?;
    model.save(out.join(MODEL_DIR)).context("writing task model")?;
    Ok(GenSummary { out, files })
}

/// The loss oracle configured in `cfg`, evaluating on `examples` per task.
pub fn build_oracle(cfg: &RunConfig, examples: usize) -> Result<Box<dyn LossOracle>> {
    match cfg.validate_oracle()? {
        OracleKind::Synthetic => {
            let dir = match &cfg.model {
                Some(m) => m.clone(),
                None => cfg.require_adapters()?.join(MODEL_DIR),
            };
            let model = SyntheticTaskModel::load(&dir)
                .with_context(|| format!("cannot load synthetic task model from {}", dir.display()))?
                .with_examples(examples)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(Box::new(model))
        }
        OracleKind::Command => {
            let cmd = cfg.oracle_cmd.as_deref().unwrap_or_default();
            let oracle = ExternalOracle::from_command_line(cmd, examples)
                .map_err(|e| CliError::Usage(e.to_string()))?
                .with_timeout(cfg.oracle_timeout);
            Ok(Box::new(oracle))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub method: ClusterMethod,
    pub partition: PartitionMap,
    pub trace: Option<SearchTrace>,
}

/// Runs the configured clustering method. The search oracle, when needed,
/// evaluates on `cfg.examples_per_task` examples.
pub fn cluster_partition(cfg: &RunConfig, set: &AdapterSet) -> Result<Clustering> {
    let method = cfg.validate_cluster()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = set.len();
    let too_many = || CliError::Usage(format!("k = {} exceeds the {} adapters in the catalog", cfg.k, n));
    let (partition, trace) = match method {
        ClusterMethod::Random => (random_partition(n, cfg.k, &mut rng).map_err(|_| too_many())?, None),
        ClusterMethod::Kmeans | ClusterMethod::KmeansSvd => {
            if cfg.k > n {
                return Err(too_many());
            }
            let features = if method == ClusterMethod::Kmeans {
                features_flat(set)
            } else {
                let top_k = cfg.top_k.unwrap_or_else(|| default_top_k(set.get(0).meta().rank));
                features_svd(set, top_k)
            }
            .map_err(|e| anyhow!(e))?;
            let opts = KMeansOptions {
                max_iters: cfg.kmeans_max_iters,
                tol: cfg.kmeans_tol,
            };
            (kmeans(&features, cfg.k, &mut rng, &opts).map_err(|e| anyhow!(e))?.partition, None)
        }
        ClusterMethod::Dirichlet => {
            if cfg.k > n {
                return Err(too_many());
            }
            let attribute = cfg.attribute.expect("validated");
            let alpha = cfg.dirichlet_alpha.expect("validated");
            (dirichlet_partition(set, cfg.k, attribute, alpha, &mut rng).map_err(|e| anyhow!(e))?, None)
        }
        ClusterMethod::D2c => {
            let oracle = build_oracle(cfg, cfg.examples_per_task)?;
            let search = SearchConfig::new(cfg.k, cfg.iters, cfg.seed, cfg.merge.clone());
            let (p, trace) = d2c_run(set, &oracle, &search).map_err(|e| anyhow!(e))?;
            (p, Some(trace))
        }
    };
    Ok(Clustering {
        method,
        partition,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct ClusterSummary {
    pub manifest: PartitionManifest,
    pub storage: StorageReport,
    pub accepted: Option<usize>,
    pub iterations: Option<usize>,
    pub group_purity: Option<f64>,
    /// Cluster purity and label concentration for the Dirichlet attribute.
    pub attribute_purity: Option<(f64, f64)>,
}

impl ClusterSummary {
    pub fn to_text(&self) -> String {
        let p = &self.manifest.partition;
        let mut s = String::new();
        writeln!(s, "method: {}", self.manifest.method).unwrap();
        writeln!(s, "K: {}", p.k()).unwrap();
        writeln!(s, "adapters: {}", p.len()).unwrap();
        writeln!(s, "non-empty clusters: {}", p.non_empty_count()).unwrap();
        writeln!(
            s,
            "storage: {}% ({} of {} adapters)",
            self.storage.percent, self.storage.clusters_used, self.storage.adapters
        )
        .unwrap();
        if let (Some(a), Some(t)) = (self.accepted, self.iterations) {
            writeln!(s, "accepted moves: {a} of {t}").unwrap();
        }
        if let Some(pu) = self.group_purity {
            writeln!(s, "group purity: {pu}").unwrap();
        }
        if let Some((pu, conc)) = self.attribute_purity {
            writeln!(s, "attribute purity: {pu}").unwrap();
            writeln!(s, "attribute concentration: {conc}").unwrap();
        }
        s
    }
}

fn per_adapter_bytes(set: &AdapterSet) -> u64 {
    set.get(0).encoded_len() as u64
}

fn labels_of(set: &AdapterSet, lang: bool) -> Option<Vec<String>> {
    set.iter()
        .map(|a| {
            if lang {
                a.meta().lang_label.clone()
            } else {
                a.meta().group_label.clone()
            }
        })
        .collect()
}

/// `cluster`: writes the partition manifest (and the trace for d2c).
pub fn cluster(cfg: &RunConfig) -> Result<ClusterSummary> {
    cfg.validate_cluster()?;
    let set = load_set(cfg)?;
    let out = create_out(cfg)?;
    let clustering = cluster_partition(cfg, &set)?;
    let p = &clustering.partition;
    let manifest = PartitionManifest {
        method: clustering.method.as_str().to_string(),
        seed: Some(cfg.seed),
        task_ids: set.task_ids().iter().map(|s| s.to_string()).collect(),
        partition: p.clone(),
    };
    manifest.write(out.join(PARTITION_FILE)).context("writing partition")?;
    if let Some(trace) = &clustering.trace {
        let f = fs::File::create(out.join(TRACE_FILE)).context("writing trace")?;
        let mut w = std::io::BufWriter::new(f);
        trace.write_jsonl(&mut w).map_err(|e| anyhow!(e))?;
        w.flush().context("writing trace")?;
    }
    let attribute_purity = (clustering.method == ClusterMethod::Dirichlet)
        .then(|| labels_of(&set, cfg.attribute == Some(adapter_cluster::partition::Attribute::Lang)))
        .flatten()
        .map(|l| (purity(p.assignment(), &l), inverse_purity(p.assignment(), &l)));
    Ok(ClusterSummary {
        storage: StorageReport::new(p.non_empty_count(), set.len(), per_adapter_bytes(&set)).map_err(|e| anyhow!(e))?,
        accepted: clustering.trace.as_ref().map(SearchTrace::accepted_count),
        iterations: clustering.trace.as_ref().map(|t| t.records.len()),
        group_purity: labels_of(&set, false).map(|l| purity(p.assignment(), &l)),
        attribute_purity,
        manifest,
    })
}

fn load_partition(cfg: &RunConfig, set: &AdapterSet) -> Result<(PartitionManifest, PartitionMap)> {
    let path = cfg.require_partition()?;
    let manifest = PartitionManifest::read(path).with_context(|| format!("cannot read partition {}", path.display()))?;
    let p = manifest
        .align_to(set)
        .with_context(|| format!("partition {} does not match the adapter catalog", path.display()))?;
    Ok((manifest, p))
}

/// `merge`: one `ADPT1` file per non-empty cluster, named `cluster_<index>`.
/// Singleton clusters are byte copies of their input file.
pub fn merge(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.merge.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = cfg.require_adapters()?.to_path_buf();
    cfg.require_partition()?;
    let set = load_set(cfg)?;
    let names = read_index(&dir).context("reading adapter index")?;
    let (_, p) = load_partition(cfg, &set)?;
    let out = create_out(cfg)?;
    let mut written = Vec::new();
    let mut index = String::new();
    for (c, members) in p.all_members().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let name = format!("cluster_{c}.adpt");
        let path = out.join(&name);
        if members.len() == 1 {
            fs::copy(dir.join(&names[members[0]]), &path).with_context(|| format!("copying into {}", path.display()))?;
        } else {
            let merged = merge_members(&set, members, &cfg.merge).map_err(|e| anyhow!(e))?;
            write_adapter(&merged, &path).map_err(|e| anyhow!(e))?;
        }
        index.push_str(&name);
        index.push('\n');
        written.push(path);
    }
    fs::write(out.join(INDEX_FILE), index).context("writing merged index")?;
    Ok(written)
}

/// One line of the machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub task_id: String,
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub k: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub partition: PartitionMap,
    pub records: Vec<ReportRecord>,
    pub mean: Option<f64>,
    pub storage: StorageReport,
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method: {}", self.method).unwrap();
        writeln!(s, "K: {} (non-empty {})", self.k, self.partition.non_empty_count()).unwrap();
        writeln!(s, "examples per task: {}", self.n).unwrap();
        match self.seed {
            Some(seed) => writeln!(s, "seed: {seed}").unwrap(),
            None => writeln!(s, "seed: none").unwrap(),
        }
        writeln!(
            s,
            "storage: {}% ({} of {} adapters, {} of {} bytes)",
            self.storage.percent,
            self.storage.clusters_used,
            self.storage.adapters,
            self.storage.bytes_used,
            self.storage.bytes_separate
        )
        .unwrap();
        match self.mean {
            Some(m) => writeln!(s, "mean loss: {m:.6}").unwrap(),
            None => writeln!(s, "mean loss: n/a").unwrap(),
        }
        writeln!(s, "failed tasks: {}", self.failures()).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<24} {:>7} {:>14}", "task_id", "cluster", "loss").unwrap();
        for (i, r) in self.records.iter().enumerate() {
            let loss = match (&r.loss, &r.error) {
                (Some(l), _) => format!("{l:.6}"),
                (None, Some(e)) => format!("error: {e}"),
                (None, None) => "-".into(),
            };
            writeln!(s, "{:<24} {:>7} {:>14}", r.task_id, self.partition.cluster_of(i), loss).unwrap();
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Scores a partition: merges every cluster once and evaluates each task on
/// its cluster's merge with `cfg.eval_examples` examples.
pub fn evaluate(
    cfg: &RunConfig,
    set: &AdapterSet,
    partition: &PartitionMap,
    method: &str,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let oracle = build_oracle(cfg, cfg.eval_examples)?;
    let ev = evaluate_partition(set, partition, &oracle, &cfg.merge).map_err(|e| anyhow!(e))?;
    let records = ev
        .losses
        .iter()
        .map(|(task, loss)| ReportRecord {
            method: method.to_string(),
            k: partition.k(),
            n: cfg.eval_examples,
            seed,
            task_id: task.clone(),
            loss: loss.as_ref().ok().copied(),
            error: loss.as_ref().err().cloned(),
        })
        .collect();
    Ok(EvalReport {
        method: method.to_string(),
        k: partition.k(),
        n: cfg.eval_examples,
        seed,
        partition: partition.clone(),
        records,
        mean: ev.mean(),
        storage: StorageReport::new(partition.non_empty_count(), set.len(), per_adapter_bytes(set))
            .map_err(|e| anyhow!(e))?,
    })
}

/// `eval`: writes `report.txt` and `report.jsonl`.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate_oracle()?;
    cfg.require_partition()?;
    let set = load_set(cfg)?;
    let (manifest, p) = load_partition(cfg, &set)?;
    let out = create_out(cfg)?;
    let report = evaluate(cfg, &set, &p, &manifest.method, manifest.seed)?;
    fs::write(out.join(REPORT_TEXT), report.to_text()).context("writing report")?;
    fs::write(out.join(REPORT_JSONL), report.to_jsonl()).context("writing report")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub mean: Option<f64>,
    pub non_empty: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub n: usize,
    pub repeats: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub method: String,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
    pub reports: Vec<EvalReport>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut s = String::from("method\tK\tn\trepeats\tfailed\tmean_loss\tstd_loss\n");
        for r in &self.rows {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.method,
                r.k,
                r.n,
                r.repeats,
                r.failed,
                fmt(r.mean),
                fmt(r.std)
            )
            .unwrap();
        }
        s
    }
}

/// Sample mean and standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (Some(m), None);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (Some(m), Some(var.sqrt()))
}

/// Configuration of one sweep cell: `k`, search examples `n` and the
/// repeat's seed (`cfg.seed + repeat`).
pub fn cell_config(cfg: &RunConfig, k: usize, n: usize, repeat: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.k = k;
    c.examples_per_task = n;
    c.seed = cfg.seed + repeat as u64;
    c
}

/// Cluster + evaluate for one cell, in memory.
pub fn run_cell(cell: &RunConfig, set: &AdapterSet) -> Result<EvalReport> {
    let clustering = cluster_partition(cell, set)?;
    evaluate(cell, set, &clustering.partition, clustering.method.as_str(), Some(cell.seed))
}

/// `sweep`: every (K, n, repeat) cell, continuing past failed cells.
pub fn sweep(cfg: &RunConfig) -> Result<SweepTable> {
    let method = cfg.require_method()?;
    let ks = if cfg.ks.is_empty() { vec![cfg.k] } else { cfg.ks.clone() };
    let ns = if cfg.ns.is_empty() {
        vec![cfg.examples_per_task]
    } else {
        cfg.ns.clone()
    };
    if cfg.repeats == 0 {
        return Err(CliError::Usage("repeats must be at least 1".into()));
    }
    if ks.contains(&0) || ns.contains(&0) {
        return Err(CliError::Usage("sweep axes must be positive".into()));
    }
    cfg.validate_oracle()?;
    cell_config(cfg, ks[0], ns[0], 0).validate_cluster()?;
    let set = load_set(cfg)?;
    let out = create_out(cfg)?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for &k in &ks {
        for &n in &ns {
            let mut means = Vec::new();
            let mut failed = 0;
            for r in 0..cfg.repeats {
                let cell = cell_config(cfg, k, n, r);
                let result = run_cell(&cell, &set);
                let (mean, non_empty, error) = match &result {
                    Ok(rep) if rep.failures() == 0 => (rep.mean, Some(rep.partition.non_empty_count()), None),
                    Ok(rep) => (
                        None,
                        Some(rep.partition.non_empty_count()),
                        Some(format!("{} task evaluations failed", rep.failures())),
                    ),
                    Err(e) => (None, None, Some(format!("{e:#}"))),
                };
                match mean {
                    Some(m) => means.push(m),
                    None => failed += 1,
                }
                cells.push(CellResult {
                    method: method.as_str().to_string(),
                    k,
                    n,
                    seed: cell.seed,
                    mean,
                    non_empty,
                    error,
                });
                if let Ok(rep) = result {
                    reports.push(rep);
                }
            }
            let (mean, std) = mean_std(&means);
            rows.push(SweepRow {
                k,
                n,
                repeats: cfg.repeats,
                failed,
                mean,
                std,
            });
        }
    }
    let table = SweepTable {
        method: method.as_str().to_string(),
        rows,
        cells,
        reports,
    };
    fs::write(out.join(SWEEP_TABLE), table.to_tsv()).context("writing sweep table")?;
    let mut cells_jsonl = String::new();
    for c in &table.cells {
        cells_jsonl.push_str(&serde_json::to_string(c).expect("cell serializes"));
        cells_jsonl.push('\n');
    }
    fs::write(out.join(SWEEP_CELLS), cells_jsonl).context("writing sweep cells")?;
    let report: String = table.reports.iter().map(EvalReport::to_jsonl).collect();
    fs::write(out.join(SWEEP_REPORT), report).context("writing sweep report")?;
    Ok(table)
}
