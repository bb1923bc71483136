//! Data-free clustering baselines: k-means over flattened adapter weights and
//! k-means over rows of the SVD-feature cosine-similarity matrix.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::partition::{PartitionError, PartitionMap};
use crate::tensor_store::{AdapterSet, LoraAdapter};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("cluster count {k} exceeds point count {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("feature row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("feature rows have unequal lengths")]
    Ragged,
    #[error("no feature rows")]
    Empty,
    #[error("top_k must be in 1..={rank}, got {top_k}")]
    TopK { top_k: usize, rank: usize },
    #[error("SVD did not converge for adapter `{task_id}`, layer `{layer}`")]
    SvdNoConvergence { task_id: String, layer: String },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    FlatWeights,
    SvdCosine,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: Vec<Vec<f64>>,
    source: FeatureSource,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, source: FeatureSource) -> Result<Self, ClusterError> {
        let Some(first) = rows.first() else {
            return Err(ClusterError::Empty);
        };
        let dim = first.len();
        for (row, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(ClusterError::Ragged);
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(ClusterError::NonFinite { row });
            }
        }
        Ok(Self { rows, source })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

/// One row per adapter: its flattened weights.
pub fn features_flat(set: &AdapterSet) -> Result<FeatureMatrix, ClusterError> {
    let rows = set
        .iter()
        .map(|a| a.flatten().into_iter().map(f64::from).collect())
        .collect();
    FeatureMatrix::new(rows, FeatureSource::FlatWeights)
}

pub fn default_top_k(rank: usize) -> usize {
    rank.min(4)
}

/// Per layer, the top `top_k` right singular vectors of `(alpha/rank)·B·A`
/// scaled by their singular values, each flipped so its largest-magnitude
/// entry is positive. Layers are concatenated in name order.
pub fn svd_feature(adapter: &LoraAdapter, top_k: usize) -> Result<Vec<f64>, ClusterError> {
    let rank = adapter.meta().rank;
    if top_k == 0 || top_k > rank {
        return Err(ClusterError::TopK { top_k, rank });
    }
    let scale = adapter.meta().scaling();
    let mut feature = Vec::new();
    for layer in adapter.layers() {
        let (a, b) = adapter.lora_pair(layer).expect("layer has both LoRA factors");
        let a = DMatrix::from_row_iterator(a.rows(), a.cols(), a.data().iter().map(|&x| f64::from(x)));
        let b = DMatrix::from_row_iterator(b.rows(), b.cols(), b.data().iter().map(|&x| f64::from(x)));
        let delta = (b * a) * scale;
        let d_in = delta.ncols();
        let svd = delta
            .try_svd(false, true, f64::EPSILON, 10_000)
            .ok_or_else(|| ClusterError::SvdNoConvergence {
                task_id: adapter.task_id().to_string(),
                layer: layer.to_string(),
            })?;
        let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
        for slot in 0..top_k {
            let Some(&i) = order.get(slot) else {
                feature.extend(std::iter::repeat_n(0.0, d_in));
                continue;
            };
            let sigma = svd.singular_values[i];
            let v: Vec<f64> = v_t.row(i).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|(i, x), (j, y)| x.abs().total_cmp(&y.abs()).then(j.cmp(i)))
                .map_or(0.0, |(_, x)| *x);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            feature.extend(v.iter().map(|x| sign * sigma * x));
        }
    }
    Ok(feature)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// N×N cosine-similarity matrix of per-adapter SVD features.
pub fn features_svd(set: &AdapterSet, top_k: usize) -> Result<FeatureMatrix, ClusterError> {
    let raw = set
        .iter()
        .map(|a| svd_feature(a, top_k))
        .collect::<Result<Vec<_>, _>>()?;
    let n = raw.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        sim[i][i] = 1.0;
        for j in i + 1..n {
            let s = cosine_similarity(&raw[i], &raw[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    FeatureMatrix::new(sim, FeatureSource::SvdCosine)
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub partition: PartitionMap,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && target < acc {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // all remaining points coincide with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops when the relative change
/// in inertia drops below `tol` or after `max_iters` iterations. A cluster
/// left empty by assignment takes the point farthest from its centroid.
pub fn kmeans<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    k: usize,
    rng: &mut R,
    opts: &KMeansOptions,
) -> Result<KMeansResult, ClusterError> {
    let points = features.rows();
    let n = points.len();
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    let dim = features.dim();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assignment = vec![0usize; n];
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..opts.max_iters.max(1) {
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            dists[i] = d;
        }

        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[assignment[i]] > 1)
                .max_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(j.cmp(&i)))
                .expect("k <= n leaves a cluster with two points");
            sizes[assignment[far]] -= 1;
            sizes[c] = 1;
            assignment[far] = c;
            dists[far] = 0.0;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&assignment) {
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            centroids[c] = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
        }

        let inertia: f64 = points
            .iter()
            .zip(&assignment)
            .map(|(p, &c)| sq_dist(p, &centroids[c]))
            .sum();
        let prev = history.last().copied();
        history.push(inertia);
        if let Some(prev) = prev {
            let change = (prev - inertia).abs();
            if change <= opts.tol * prev.abs() || prev == 0.0 {
                break;
            }
        }
    }

    Ok(KMeansResult {
        partition: PartitionMap::new(assignment, k)?,
        centroids,
        inertia: *history.last().unwrap(),
        history,
    })
}
