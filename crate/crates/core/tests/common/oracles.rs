//! Independent re-implementations used as oracles.

use std::collections::BTreeMap;

/// Greedy herding written from the definition: at step k take the candidate
/// whose addition brings the running mean of picks closest to the class
/// mean. Picks stay candidates; ties go to the lowest id. Returns ids.
pub fn brute_force_herding(ids: &[u64], rows: &[Vec<f64>], m: usize) -> Vec<u64> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut sum = vec![0.0; d];
    let mut out = Vec::new();
    for k in 1..=m.min(n) {
        let mut scored: Vec<(f64, u64, usize)> = (0..n)
            .map(|i| {
                let sq: f64 = (0..d).map(|j| (mu[j] - (rows[i][j] + sum[j]) * (1.0 / k as f64)).powi(2)).sum();
                (sq, ids[i], i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let i = scored[0].2;
        for j in 0..d {
            sum[j] += rows[i][j];
        }
        out.push(ids[i]);
    }
    out
}

/// Per-class counts after one rebalance: every class gets
/// `min(ceil(M / k), what it has)`, old classes can only shrink, and the
/// largest classes (highest index on ties) give up one exemplar at a time
/// until the total fits.
pub fn expected_counts(
    previous: &BTreeMap<usize, usize>,
    new_available: &BTreeMap<usize, usize>,
    capacity: usize,
) -> BTreeMap<usize, usize> {
    let k = previous.len() + new_available.len();
    let quota = capacity.div_ceil(k);
    let mut counts: BTreeMap<usize, usize> =
        previous.iter().chain(new_available).map(|(&c, &have)| (c, have.min(quota))).collect();
    while counts.values().sum::<usize>() > capacity {
        let largest = *counts.values().max().unwrap();
        let victim = *counts.iter().rev().find(|(_, &v)| v == largest).unwrap().0;
        *counts.get_mut(&victim).unwrap() -= 1;
    }
    counts
}

/// `A_avg` and `A_last` straight from the definitions.
pub fn hand_metrics(rows: &[Vec<f64>]) -> (f64, f64) {
    let a_t: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    (a_t.iter().sum::<f64>() / a_t.len() as f64, *a_t.last().unwrap())
}
