//! Partition agreement metrics.

use std::collections::HashMap;
use std::hash::Hash;

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Returns 1.0 when both labelings are identical up to relabeling, including
/// the degenerate case where both put everything in one cluster.
pub fn adjusted_rand_index<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    let mut rows: HashMap<&A, usize> = HashMap::new();
    let mut cols: HashMap<&B, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Fraction of items whose label matches the majority label of their cluster.
pub fn purity<C: Eq + Hash, L: Eq + Hash>(clusters: &[C], labels: &[L]) -> f64 {
    assert_eq!(clusters.len(), labels.len());
    if clusters.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&C, HashMap<&L, usize>> = HashMap::new();
    for (c, l) in clusters.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len() as f64
}

/// Fraction of items sitting in the modal cluster of their label; 1.0 when
/// every label lies wholly inside one cluster.
pub fn inverse_purity<C: Eq + Hash, L: Eq + Hash>(clusters: &[C], labels: &[L]) -> f64 {
    purity(labels, clusters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_up_to_relabeling() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]), 1.0);
    }

    #[test]
    fn known_value() {
        // sklearn: adjusted_rand_score([0,0,1,1], [0,0,1,2]) == 0.5714285714285715
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]);
        assert!((ari - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &["a", "a", "b", "b"]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 1], &["a", "b", "a", "b"]), 0.75);
        assert_eq!(purity(&[0, 0, 0, 0], &["a", "a", "b", "b"]), 0.5);
        assert_eq!(inverse_purity(&[0, 0, 0, 0], &["a", "a", "b", "b"]), 1.0);
    }
}
