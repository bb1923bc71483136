//! Merge operators over flattened task vectors: linear averaging, TIES and
//! DARE.
//!
//! Per-coordinate reductions sort their addends before summing, so every
//! operator gives the same bits for any ordering of its inputs when the
//! weights travel with them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor_store::{ensure_same_schema, AdapterError, AdapterMeta, LoraAdapter};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("nothing to merge")]
    Empty,
    #[error("input {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("{got} weights given for {expected} inputs")]
    WeightCount { got: usize, expected: usize },
    #[error("weights must be finite and non-negative with at least one positive")]
    InvalidWeights,
    #[error("density must be in (0, 1], got {0}")]
    Density(f64),
    #[error("drop rate must be in [0, 1), got {0}")]
    DropRate(f64),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    Linear,
    Ties,
    Dare,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(MergeMethod::Linear),
            "ties" => Ok(MergeMethod::Ties),
            "dare" => Ok(MergeMethod::Dare),
            other => Err(format!("unknown merge method `{other}` (expected linear, ties or dare)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Fraction of coordinates TIES keeps per input.
    pub density: f64,
    /// Probability DARE zeroes a coordinate.
    pub drop_rate: f64,
    /// Per-input weights; `None` means every input weighs 1.
    pub weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Ties,
            density: 0.5,
            drop_rate: 0.0,
            weights: None,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn linear() -> Self {
        Self {
            method: MergeMethod::Linear,
            ..Self::default()
        }
    }

    pub fn ties(density: f64) -> Self {
        Self {
            method: MergeMethod::Ties,
            density,
            ..Self::default()
        }
    }

    pub fn dare(drop_rate: f64, seed: u64) -> Self {
        Self {
            method: MergeMethod::Dare,
            drop_rate,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(MergeError::Density(self.density));
        }
        if !(self.drop_rate >= 0.0 && self.drop_rate < 1.0) {
            return Err(MergeError::DropRate(self.drop_rate));
        }
        if let Some(w) = &self.weights {
            check_weights(w)?;
        }
        Ok(())
    }

    /// Stable textual form, used for cache keys and run manifests.
    pub fn canonical_string(&self) -> String {
        let weights = match &self.weights {
            None => "unary".to_string(),
            Some(w) => w.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
        };
        format!(
            "method={};density={:?};drop_rate={:?};weights={};seed={}",
            self.method, self.density, self.drop_rate, weights, self.seed
        )
    }

    fn weights_for(&self, n: usize) -> Result<Vec<f64>, MergeError> {
        match &self.weights {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() == n => Ok(w.clone()),
            Some(w) => Err(MergeError::WeightCount {
                got: w.len(),
                expected: n,
            }),
        }
    }
}

fn check_weights(weights: &[f64]) -> Result<(), MergeError> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !weights.iter().any(|w| *w > 0.0) {
        return Err(MergeError::InvalidWeights);
    }
    Ok(())
}

fn check_inputs(vectors: &[&[f32]], weights: &[f64]) -> Result<usize, MergeError> {
    let Some(first) = vectors.first() else {
        return Err(MergeError::Empty);
    };
    if weights.len() != vectors.len() {
        return Err(MergeError::WeightCount {
            got: weights.len(),
            expected: vectors.len(),
        });
    }
    check_weights(weights)?;
    let dim = first.len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(MergeError::LengthMismatch {
                index,
                got: v.len(),
                expected: dim,
            });
        }
    }
    Ok(dim)
}

/// Order-independent sum: addends are sorted before accumulation.
fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    buf.iter().sum()
}

/// Coordinatewise weighted mean, weights normalized to sum to one.
pub fn linear_merge(vectors: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>, MergeError> {
    let dim = check_inputs(vectors, weights)?;
    let mut total: Vec<f64> = weights.to_vec();
    let total = sorted_sum(&mut total);
    let mut buf = vec![0.0f64; vectors.len()];
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        for (slot, (v, w)) in buf.iter_mut().zip(vectors.iter().zip(weights)) {
            *slot = w * v[i] as f64;
        }
        out.push((sorted_sum(&mut buf) / total) as f32);
    }
    Ok(out)
}

/// Indices of the `keep` largest-magnitude entries; ties go to the lower index.
fn top_magnitude(values: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; values.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

/// Number of coordinates TIES keeps per input: `ceil(density * dim)`, at least one.
pub fn ties_keep_count(density: f64, dim: usize) -> usize {
    ((density * dim as f64).ceil() as usize).clamp(1.min(dim), dim)
}

/// TIES: trim each weighted task vector to its top `density` fraction by
/// magnitude, elect a per-coordinate sign from the trimmed sum, then average
/// only the trimmed values that agree with the elected sign.
///
/// Weights are rescaled to mean one, so unary weights leave inputs untouched.
pub fn ties_merge(vectors: &[&[f32]], density: f64, weights: &[f64]) -> Result<Vec<f32>, MergeError> {
    let dim = check_inputs(vectors, weights)?;
    if !(density > 0.0 && density <= 1.0) {
        return Err(MergeError::Density(density));
    }
    let mut w: Vec<f64> = weights.to_vec();
    let mean_w = sorted_sum(&mut w) / weights.len() as f64;
    let keep = ties_keep_count(density, dim);

    let trimmed: Vec<Vec<f64>> = vectors
        .iter()
        .zip(weights)
        .map(|(v, wt)| {
            let scale = wt / mean_w;
            let scaled: Vec<f64> = v.iter().map(|&x| scale * x as f64).collect();
            let mask = top_magnitude(&scaled, keep);
            scaled
                .into_iter()
                .zip(mask)
                .map(|(x, k)| if k { x } else { 0.0 })
                .collect()
        })
        .collect();

    let mut buf = Vec::with_capacity(vectors.len());
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim {
        buf.clear();
        buf.extend(trimmed.iter().map(|t| t[i]));
        let elected = sorted_sum(&mut buf).signum_or_zero();
        if elected == 0.0 {
            out.push(0.0);
            continue;
        }
        buf.retain(|x| x.signum_or_zero() == elected);
        let count = buf.len();
        out.push((sorted_sum(&mut buf) / count as f64) as f32);
    }
    Ok(out)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Random drop-and-rescale of one vector. The stream for input `index` is
/// ChaCha8 seeded with `seed`, stream id `index`.
pub fn dare_sparsify(v: &[f32], drop_rate: f64, seed: u64, index: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let scale = 1.0 / (1.0 - drop_rate);
    v.iter()
        .map(|&x| {
            let u: f64 = rng.random();
            if u < drop_rate {
                0.0
            } else {
                (x as f64 * scale) as f32
            }
        })
        .collect()
}

/// DARE: per input, zero each coordinate with probability `drop_rate` and
/// rescale survivors by `1/(1 - drop_rate)`, then take the weighted mean.
pub fn dare_merge(
    vectors: &[&[f32]],
    drop_rate: f64,
    weights: &[f64],
    seed: u64,
) -> Result<Vec<f32>, MergeError> {
    check_inputs(vectors, weights)?;
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(MergeError::DropRate(drop_rate));
    }
    let sparse: Vec<Vec<f32>> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| dare_sparsify(v, drop_rate, seed, i as u64))
        .collect();
    let refs: Vec<&[f32]> = sparse.iter().map(Vec::as_slice).collect();
    linear_merge(&refs, weights)
}

/// Merges flat vectors with the configured operator.
pub fn merge_flat(vectors: &[&[f32]], cfg: &MergeConfig) -> Result<Vec<f32>, MergeError> {
    cfg.validate()?;
    let weights = cfg.weights_for(vectors.len())?;
    match cfg.method {
        MergeMethod::Linear => linear_merge(vectors, &weights),
        MergeMethod::Ties => ties_merge(vectors, cfg.density, &weights),
        MergeMethod::Dare => dare_merge(vectors, cfg.drop_rate, &weights, cfg.seed),
    }
}

/// Merges the adapters of one cluster into a single adapter of the same
/// schema. A single input is returned unchanged.
///
/// The merged adapter's task id joins the sorted member ids with `+`; rank and
/// alpha come from the first input and the labels survive only if all inputs
/// agree on them.
pub fn merge(inputs: &[&LoraAdapter], cfg: &MergeConfig) -> Result<LoraAdapter, MergeError> {
    let Some(first) = inputs.first() else {
        return Err(MergeError::Empty);
    };
    cfg.validate()?;
    if inputs.len() == 1 {
        cfg.weights_for(1)?;
        return Ok((*first).clone());
    }
    for a in &inputs[1..] {
        ensure_same_schema(first, a)?;
    }
    let flats: Vec<Vec<f32>> = inputs.iter().map(|a| a.flatten()).collect();
    let refs: Vec<&[f32]> = flats.iter().map(Vec::as_slice).collect();
    let merged = merge_flat(&refs, cfg)?;

    let mut ids: Vec<&str> = inputs.iter().map(|a| a.task_id()).collect();
    ids.sort_unstable();
    let common = |f: fn(&AdapterMeta) -> &Option<String>| {
        let v = f(first.meta());
        inputs.iter().all(|a| f(a.meta()) == v).then(|| v.clone()).flatten()
    };
    let meta = AdapterMeta {
        task_id: ids.join("+"),
        rank: first.meta().rank,
        alpha: first.meta().alpha,
        group_label: common(|m| &m.group_label),
        lang_label: common(|m| &m.lang_label),
    };
    Ok(LoraAdapter::from_flat(meta, &first.schema(), &merged)?)
}
