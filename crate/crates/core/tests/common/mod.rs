#![allow(dead_code)]

use adapter_cluster::oracle::synthetic_generate;
use adapter_cluster::{AdapterMeta, AdapterSet, LoraAdapter, Schema, SyntheticSpec, SyntheticTaskModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Straight transcription of trim / elect / disjoint mean for unary weights.
pub fn naive_ties(vectors: &[Vec<f32>], density: f64) -> Vec<f32> {
    let dim = vectors[0].len();
    let keep = ((density * dim as f64).ceil() as usize).max(1).min(dim);
    let mut trimmed = Vec::new();
    for v in vectors {
        let mut idx: Vec<usize> = (0..dim).collect();
        // stable sort: equal magnitudes keep index order
        idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
        let mut t = vec![0.0f32; dim];
        for &i in &idx[..keep] {
            t[i] = v[i];
        }
        trimmed.push(t);
    }
    let mut out = vec![0.0f32; dim];
    for i in 0..dim {
        let mut total = 0.0f64;
        for t in &trimmed {
            total += t[i] as f64;
        }
        let sign = if total > 0.0 {
            1.0
        } else if total < 0.0 {
            -1.0
        } else {
            continue;
        };
        let mut sum = 0.0f64;
        let mut count = 0;
        for t in &trimmed {
            if t[i] as f64 * sign > 0.0 {
                sum += t[i] as f64;
                count += 1;
            }
        }
        out[i] = (sum / count as f64) as f32;
    }
    out
}

/// Values on a 1/1024 grid in [-8, 8], with extra zeros and repeated
/// magnitudes so trimming ties are exercised.
pub fn grid_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            2 => -1.0,
            _ => rng.random_range(-8192i32..=8192) as f32 / 1024.0,
        })
        .collect()
}

pub fn random_adapter(rng: &mut ChaCha8Rng, task: &str, schema: &Schema, rank: usize) -> LoraAdapter {
    let flat: Vec<f32> = (0..schema.dim())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let mut meta = AdapterMeta::new(task, rank, rng.random_range(1..64) as f64);
    if rng.random_bool(0.5) {
        meta = meta.with_group(format!("g{}", rng.random_range(0..5)));
    }
    if rng.random_bool(0.5) {
        meta = meta.with_lang(format!("l{}", rng.random_range(0..3)));
    }
    LoraAdapter::from_flat(meta, schema, &flat).unwrap()
}

/// Pair-counting ARI straight from the definition.
pub fn brute_force_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut pairs) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / pairs;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Three unit Gaussian blobs whose centers sit 10σ apart along the first axis.
pub fn blobs(rng: &mut ChaCha8Rng, per_blob: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for b in 0..3 {
        for _ in 0..per_blob {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            row[0] += 10.0 * b as f64;
            rows.push(row);
            labels.push(b);
        }
    }
    (rows, labels)
}

pub fn fleet(seed: u64) -> (AdapterSet, SyntheticTaskModel) {
    fleet_with(&SyntheticSpec::default(), seed)
}

pub fn fleet_with(spec: &SyntheticSpec, seed: u64) -> (AdapterSet, SyntheticTaskModel) {
    synthetic_generate(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn planted(set: &AdapterSet) -> Vec<String> {
    set.iter().map(|a| a.meta().group_label.clone().unwrap()).collect()
}
