//! Data-driven clustering: a single-move, strict-improvement local search over
//! partition maps, scored by a loss oracle on the moved adapter's own task.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge::{merge, MergeConfig, MergeError};
use crate::oracle::{CacheKey, CachedOracle, LossOracle, OracleError};
use crate::partition::{random_partition, PartitionError, PartitionMap};
use crate::tensor_store::{AdapterSet, LoraAdapter};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("adapter set is empty")]
    EmptySet,
    #[error("iteration {iter}: {source}")]
    Oracle {
        iter: usize,
        #[source]
        source: OracleError,
    },
    #[error("iteration {iter}: {source}")]
    Merge {
        iter: usize,
        #[source]
        source: MergeError,
    },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("trace record {iter} does not match the partition it replays onto: {msg}")]
    Replay { iter: usize, msg: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    pub merge: MergeConfig,
    /// When false, a proposal that would empty its source cluster is skipped.
    pub allow_empty_source_result: bool,
}

impl SearchConfig {
    pub fn new(k: usize, iters: usize, seed: u64, merge: MergeConfig) -> Self {
        Self {
            k,
            iters,
            seed,
            merge,
            allow_empty_source_result: true,
        }
    }
}

/// One proposal. `dst_cluster`, `task_id` and the losses are absent when the
/// iteration had no legal move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub src_cluster: usize,
    pub dst_cluster: Option<usize>,
    pub task_id: Option<String>,
    pub loss_src: Option<f64>,
    pub loss_dst: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrace {
    pub initial: PartitionMap,
    pub records: Vec<TraceRecord>,
    pub final_partition: PartitionMap,
}

impl SearchTrace {
    pub fn accepted_count(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    /// Re-applies every accepted move to `initial`.
    pub fn replay(&self, set: &AdapterSet) -> Result<PartitionMap, SearchError> {
        replay(&self.initial, &self.records, set)
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SearchError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_trace_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, SearchError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SearchError::TraceParse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn replay(initial: &PartitionMap, records: &[TraceRecord], set: &AdapterSet) -> Result<PartitionMap, SearchError> {
    let mut p = initial.clone();
    for r in records.iter().filter(|r| r.accepted) {
        let err = |msg: &str| SearchError::Replay {
            iter: r.iter,
            msg: msg.to_string(),
        };
        let task = r.task_id.as_deref().ok_or_else(|| err("accepted record without task"))?;
        let dst = r.dst_cluster.ok_or_else(|| err("accepted record without destination"))?;
        let t = set.index_of(task).ok_or_else(|| err("unknown task"))?;
        if p.cluster_of(t) != r.src_cluster {
            return Err(err("task is not in the recorded source cluster"));
        }
        if dst >= p.k() {
            return Err(err("destination out of range"));
        }
        p.move_adapter(t, dst);
    }
    Ok(p)
}

/// Evaluates `task` on the merge of `members`, going through the cache.
pub fn cluster_loss<O: LossOracle>(
    set: &AdapterSet,
    members: &[usize],
    task: usize,
    merge_cfg: &MergeConfig,
    oracle: &CachedOracle<O>,
) -> Result<f64, ClusterLossError> {
    let ids: Vec<&str> = members.iter().map(|&i| set.get(i).task_id()).collect();
    let key = CacheKey::new(merge_cfg, &ids, set.get(task).task_id());
    oracle.evaluate_keyed(key, || merge_members(set, members, merge_cfg))
}

pub fn merge_members(set: &AdapterSet, members: &[usize], cfg: &MergeConfig) -> Result<LoraAdapter, ClusterLossError> {
    let refs: Vec<&LoraAdapter> = members.iter().map(|&i| set.get(i)).collect();
    Ok(merge(&refs, cfg)?)
}

#[derive(Debug, Error)]
pub enum ClusterLossError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

fn at_iter(iter: usize) -> impl Fn(ClusterLossError) -> SearchError {
    move |e| match e {
        ClusterLossError::Oracle(source) => SearchError::Oracle { iter, source },
        ClusterLossError::Merge(source) => SearchError::Merge { iter, source },
    }
}

/// Runs `cfg.iters` proposals from a random initial partition.
///
/// Each iteration draws, from one ChaCha8 stream seeded with `cfg.seed`:
/// a source cluster uniformly among the non-empty ones, a destination
/// uniformly among the other `K − 1`, and an adapter uniformly from the
/// source. The source loss is taken with the adapter still in place; the
/// move is kept only if the destination loss is strictly lower. When
/// `K ≥ N` the identity partition is returned without proposals.
pub fn d2c_run<O: LossOracle>(
    set: &AdapterSet,
    oracle: &O,
    cfg: &SearchConfig,
) -> Result<(PartitionMap, SearchTrace), SearchError> {
    let cached = CachedOracle::new(oracle);
    d2c_run_cached(set, &cached, cfg)
}

pub fn d2c_run_cached<O: LossOracle>(
    set: &AdapterSet,
    oracle: &CachedOracle<O>,
    cfg: &SearchConfig,
) -> Result<(PartitionMap, SearchTrace), SearchError> {
    if set.is_empty() {
        return Err(SearchError::EmptySet);
    }
    cfg.merge.validate().map_err(|source| SearchError::Merge { iter: 0, source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = set.len();
    if cfg.k >= n {
        let p = PartitionMap::identity(n)?;
        let trace = SearchTrace {
            initial: p.clone(),
            records: Vec::new(),
            final_partition: p.clone(),
        };
        return Ok((p, trace));
    }
    let initial = random_partition(n, cfg.k, &mut rng)?;
    let (final_partition, records) = search_from(set, oracle, cfg, initial.clone(), &mut rng)?;
    let trace = SearchTrace {
        initial,
        records,
        final_partition: final_partition.clone(),
    };
    Ok((final_partition, trace))
}

/// The proposal loop from a given starting partition.
pub fn search_from<O: LossOracle, R: Rng + ?Sized>(
    set: &AdapterSet,
    oracle: &CachedOracle<O>,
    cfg: &SearchConfig,
    mut partition: PartitionMap,
    rng: &mut R,
) -> Result<(PartitionMap, Vec<TraceRecord>), SearchError> {
    let k = partition.k();
    let mut records = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let non_empty = partition.non_empty_clusters();
        let src = non_empty[rng.random_range(0..non_empty.len())];
        if k == 1 {
            records.push(TraceRecord {
                iter,
                src_cluster: src,
                dst_cluster: None,
                task_id: None,
                loss_src: None,
                loss_dst: None,
                accepted: false,
            });
            continue;
        }
        let r = rng.random_range(0..k - 1);
        let dst = if r >= src { r + 1 } else { r };
        let src_members = partition.members(src);
        let t = src_members[rng.random_range(0..src_members.len())];
        let task_id = set.get(t).task_id().to_string();

        if !cfg.allow_empty_source_result && src_members.len() == 1 {
            records.push(TraceRecord {
                iter,
                src_cluster: src,
                dst_cluster: Some(dst),
                task_id: Some(task_id),
                loss_src: None,
                loss_dst: None,
                accepted: false,
            });
            continue;
        }

        let loss_src = cluster_loss(set, &src_members, t, &cfg.merge, oracle).map_err(at_iter(iter))?;
        partition.move_adapter(t, dst);
        let dst_members = partition.members(dst);
        let loss_dst = match cluster_loss(set, &dst_members, t, &cfg.merge, oracle) {
            Ok(l) => l,
            Err(e) => {
                partition.move_adapter(t, src);
                return Err(at_iter(iter)(e));
            }
        };
        let accepted = loss_dst < loss_src;
        if !accepted {
            partition.move_adapter(t, src);
        }
        records.push(TraceRecord {
            iter,
            src_cluster: src,
            dst_cluster: Some(dst),
            task_id: Some(task_id),
            loss_src: Some(loss_src),
            loss_dst: Some(loss_dst),
            accepted,
        });
    }
    Ok((partition, records))
}

/// Per-task losses of a partition: each cluster merged once, each task scored
/// against its own cluster's merge.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEvaluation {
    pub losses: Vec<(String, Result<f64, String>)>,
}

impl PartitionEvaluation {
    /// Unweighted mean over tasks that evaluated successfully.
    pub fn mean(&self) -> Option<f64> {
        let ok: Vec<f64> = self.losses.iter().filter_map(|(_, l)| l.as_ref().ok().copied()).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.losses
            .iter()
            .filter_map(|(t, l)| l.as_ref().err().map(|e| (t.as_str(), e.as_str())))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.losses.iter().all(|(_, l)| l.is_ok())
    }
}

pub fn evaluate_partition<O: LossOracle>(
    set: &AdapterSet,
    partition: &PartitionMap,
    oracle: &O,
    merge_cfg: &MergeConfig,
) -> Result<PartitionEvaluation, PartitionError> {
    if partition.len() != set.len() {
        return Err(PartitionError::Coverage {
            got: partition.len(),
            expected: set.len(),
        });
    }
    let mut losses: Vec<Option<(String, Result<f64, String>)>> = vec![None; set.len()];
    for members in partition.all_members().into_iter().filter(|m| !m.is_empty()) {
        let merged = merge_members(set, &members, merge_cfg);
        for &t in &members {
            let task = set.get(t).task_id().to_string();
            let loss = match &merged {
                Ok(m) => oracle.evaluate(m, &task).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            losses[t] = Some((task, loss));
        }
    }
    Ok(PartitionEvaluation {
        losses: losses.into_iter().map(|l| l.expect("every adapter is in a cluster")).collect(),
    })
}
