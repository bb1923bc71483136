//! Partition maps over an adapter catalog and the samplers that produce them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::tensor_store::AdapterSet;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("cluster count {k} exceeds adapter count {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("adapter {index} assigned to cluster {cluster}, but K = {k}")]
    ClusterOutOfRange { index: usize, cluster: usize, k: usize },
    #[error("partition is empty")]
    Empty,
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("adapter `{task_id}` has no {attribute}")]
    MissingAttribute { task_id: String, attribute: Attribute },
    #[error("partition covers {got} adapters, catalog has {expected}")]
    Coverage { got: usize, expected: usize },
    #[error("partition lists `{0}`, which is not in the catalog")]
    UnknownTask(String),
    #[error("catalog task `{0}` is missing from the partition")]
    MissingTask(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Assignment of each adapter (by catalog index) to one of `k` clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartitionMap {
    assignment: Vec<usize>,
    k: usize,
}

impl PartitionMap {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self, PartitionError> {
        if k == 0 {
            return Err(PartitionError::ZeroClusters);
        }
        if assignment.is_empty() {
            return Err(PartitionError::Empty);
        }
        if k > assignment.len() {
            return Err(PartitionError::TooManyClusters {
                k,
                n: assignment.len(),
            });
        }
        if let Some((index, &cluster)) = assignment.iter().enumerate().find(|(_, &c)| c >= k) {
            return Err(PartitionError::ClusterOutOfRange { index, cluster, k });
        }
        Ok(Self { assignment, k })
    }

    /// Every adapter in cluster 0.
    pub fn single(n: usize) -> Result<Self, PartitionError> {
        Self::new(vec![0; n], 1)
    }

    /// Adapter `i` in cluster `i`.
    pub fn identity(n: usize) -> Result<Self, PartitionError> {
        Self::new((0..n).collect(), n)
    }

    /// Builds a map from per-cluster member lists. Each index in `0..n` must
    /// appear exactly once.
    pub fn from_members(members: &[Vec<usize>]) -> Result<Self, PartitionError> {
        let n: usize = members.iter().map(Vec::len).sum();
        let mut assignment = vec![usize::MAX; n];
        for (c, ms) in members.iter().enumerate() {
            for &i in ms {
                if i >= n || assignment[i] != usize::MAX {
                    return Err(PartitionError::Coverage { got: n, expected: n });
                }
                assignment[i] = c;
            }
        }
        Self::new(assignment, members.len())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, adapter: usize) -> usize {
        self.assignment[adapter]
    }

    /// Catalog indices of the adapters in cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == c).then_some(i))
            .collect()
    }

    pub fn all_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn non_empty_clusters(&self) -> Vec<usize> {
        self.cluster_sizes()
            .iter()
            .enumerate()
            .filter_map(|(c, &s)| (s > 0).then_some(c))
            .collect()
    }

    pub fn non_empty_count(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s > 0).count()
    }

    /// Moves adapter `adapter` into cluster `to`.
    pub fn move_adapter(&mut self, adapter: usize, to: usize) {
        assert!(to < self.k, "cluster {to} out of range (K = {})", self.k);
        self.assignment[adapter] = to;
    }
}

/// Uniform random assignment, then empty clusters are filled by taking the
/// highest-index member of a largest cluster (lowest cluster index on ties).
pub fn random_partition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<PartitionMap, PartitionError> {
    if k == 0 {
        return Err(PartitionError::ZeroClusters);
    }
    if k > n {
        return Err(PartitionError::TooManyClusters { k, n });
    }
    let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let largest = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        let victim = (0..n).rev().find(|&i| assignment[i] == largest).unwrap();
        assignment[victim] = empty;
    }
    PartitionMap::new(assignment, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Group,
    Lang,
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Attribute::Group => "group_label",
            Attribute::Lang => "lang_label",
        })
    }
}

impl std::str::FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "group_label" | "group" | "task" => Ok(Attribute::Group),
            "lang_label" | "lang" => Ok(Attribute::Lang),
            other => Err(format!("unknown attribute `{other}` (expected group_label or lang_label)")),
        }
    }
}

/// Draws `log(x)` for `x ~ Gamma(shape, 1)`, staying finite for tiny shapes
/// via `Gamma(a) = Gamma(a + 1) * U^(1/a)`.
fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("valid gamma shape").sample(rng);
        return g.ln();
    }
    let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma shape").sample(rng);
    let u = 1.0 - rng.random::<f64>();
    g.ln() + u.ln() / shape
}

/// Symmetric Dirichlet draw over `k` categories.
pub fn dirichlet_sample<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = (0..k).map(|_| log_gamma_sample(alpha, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Per attribute value `g`, draws `p_g ~ Dirichlet(alpha * 1_k)` and assigns
/// each adapter labelled `g` to a cluster drawn from `p_g`. Small `alpha`
/// concentrates each label in few clusters.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    set: &AdapterSet,
    k: usize,
    attribute: Attribute,
    alpha: f64,
    rng: &mut R,
) -> Result<PartitionMap, PartitionError> {
    if k == 0 {
        return Err(PartitionError::ZeroClusters);
    }
    if k > set.len() {
        return Err(PartitionError::TooManyClusters { k, n: set.len() });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(PartitionError::Alpha(alpha));
    }
    let labels = set
        .iter()
        .map(|a| {
            let label = match attribute {
                Attribute::Group => &a.meta().group_label,
                Attribute::Lang => &a.meta().lang_label,
            };
            label.as_deref().ok_or_else(|| PartitionError::MissingAttribute {
                task_id: a.task_id().to_string(),
                attribute,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<&str> = Vec::new();
    for l in &labels {
        if !order.contains(l) {
            order.push(l);
        }
    }
    let proportions: HashMap<&str, Vec<f64>> = order
        .iter()
        .map(|&l| (l, dirichlet_sample(k, alpha, rng)))
        .collect();
    let assignment = labels.iter().map(|l| categorical(&proportions[l], rng)).collect();
    PartitionMap::new(assignment, k)
}

/// Percentage of separate-adapter storage used by `k_used` merged adapters.
pub fn storage_fraction(k_used: usize, n: usize) -> Result<f64, PartitionError> {
    if k_used == 0 {
        return Err(PartitionError::ZeroClusters);
    }
    if k_used > n {
        return Err(PartitionError::TooManyClusters { k: k_used, n });
    }
    Ok(100.0 * k_used as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub clusters_used: usize,
    pub adapters: usize,
    pub bytes_used: u64,
    pub bytes_separate: u64,
    pub percent: f64,
}

impl StorageReport {
    pub fn new(clusters_used: usize, adapters: usize, per_adapter_bytes: u64) -> Result<Self, PartitionError> {
        Ok(Self {
            clusters_used,
            adapters,
            bytes_used: clusters_used as u64 * per_adapter_bytes,
            bytes_separate: adapters as u64 * per_adapter_bytes,
            percent: storage_fraction(clusters_used, adapters)?,
        })
    }
}

/// A partition map labelled with catalog task ids, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    pub method: String,
    pub seed: Option<u64>,
    pub task_ids: Vec<String>,
    pub partition: PartitionMap,
}

impl PartitionManifest {
    /// Text form: `# key = value` header lines, then `task_id<TAB>cluster`
    /// per adapter in catalog order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# k = {}", self.partition.k()).unwrap();
        writeln!(s, "# n = {}", self.partition.len()).unwrap();
        match self.seed {
            Some(seed) => writeln!(s, "# seed = {seed}").unwrap(),
            None => writeln!(s, "# seed = none").unwrap(),
        }
        writeln!(s, "# method = {}", self.method).unwrap();
        for (t, c) in self.task_ids.iter().zip(self.partition.assignment()) {
            writeln!(s, "{t}\t{c}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PartitionError> {
        let mut k = None;
        let mut n = None;
        let mut seed = None;
        let mut method = String::new();
        let mut task_ids = Vec::new();
        let mut assignment = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| PartitionError::Parse { line, msg };
            if raw.trim().is_empty() {
                continue;
            }
            if let Some(h) = raw.strip_prefix('#') {
                let Some((key, value)) = h.split_once('=') else {
                    continue;
                };
                let value = value.trim();
                let num = || value.parse::<usize>().map_err(|e| err(format!("{}: {e}", key.trim())));
                match key.trim() {
                    "k" => k = Some(num()?),
                    "n" => n = Some(num()?),
                    "seed" if value == "none" => seed = None,
                    "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(format!("seed: {e}")))?),
                    "method" => method = value.to_string(),
                    _ => {}
                }
                continue;
            }
            let (task, cluster) = raw
                .split_once('\t')
                .ok_or_else(|| err("expected `task_id<TAB>cluster`".into()))?;
            let cluster = cluster
                .trim()
                .parse::<usize>()
                .map_err(|e| err(format!("cluster index: {e}")))?;
            task_ids.push(task.to_string());
            assignment.push(cluster);
        }
        let k = k.ok_or(PartitionError::Parse {
            line: 0,
            msg: "missing `# k = ` header".into(),
        })?;
        if let Some(n) = n {
            if n != assignment.len() {
                return Err(PartitionError::Coverage {
                    got: assignment.len(),
                    expected: n,
                });
            }
        }
        Ok(Self {
            method,
            seed,
            task_ids,
            partition: PartitionMap::new(assignment, k)?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PartitionError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PartitionError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Re-indexes the manifest against a catalog, which may list tasks in a
    /// different order.
    pub fn align_to(&self, set: &AdapterSet) -> Result<PartitionMap, PartitionError> {
        if self.task_ids.len() != set.len() {
            return Err(PartitionError::Coverage {
                got: self.task_ids.len(),
                expected: set.len(),
            });
        }
        let by_task: HashMap<&str, usize> = self
            .task_ids
            .iter()
            .zip(self.partition.assignment())
            .map(|(t, &c)| (t.as_str(), c))
            .collect();
        for t in &self.task_ids {
            if set.index_of(t).is_none() {
                return Err(PartitionError::UnknownTask(t.clone()));
            }
        }
        let assignment = set
            .task_ids()
            .iter()
            .map(|t| by_task.get(t).copied().ok_or_else(|| PartitionError::MissingTask(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        PartitionMap::new(assignment, self.partition.k())
    }
}
