//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::Vector3;

/// Adjusted Rand index of two labelings of the same items.
pub fn adjusted_rand_index(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut rows: BTreeMap<u64, f64> = BTreeMap::new();
    let mut cols: BTreeMap<u64, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Canonical relabeling by first appearance, for partition equality checks.
pub fn canonical_partition(labels: &[u64]) -> Vec<u64> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len() as u64;
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub fn brute_nearest(p: &Vector3<f64>, set: &[Vector3<f64>], skip: Option<usize>) -> f64 {
    set.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, q)| (p - q).norm()).fold(f64::INFINITY, f64::min)
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}
