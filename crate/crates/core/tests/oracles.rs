mod common;

use std::collections::BTreeMap;

use common::oracles::{brute_force_herding, expected_counts, hand_metrics};
use sscl_core::eval::{incremental_metrics, AccuracyMatrix};
use sscl_core::exemplar::{herding_order, ExemplarBuffer};
use sscl_core::numkit::Matrix;
use sscl_core::rng::{gaussian, rng_for};
use sscl_core::stream::Sample;
use rand::Rng;

#[test]
fn herding_matches_brute_force() {
    let mut rng = rng_for(11, "herding-oracle", 0);
    for case in 0..200 {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=16);
        let d = rng.random_range(1..=6);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
        // duplicates exercise the tie rule
        if case % 4 == 0 && n > 1 {
            rows[n - 1] = rows[0].clone();
        }
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        if case % 3 == 0 {
            ids.reverse();
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let got: Vec<u64> = herding_order(&ids, &x, m).unwrap().into_iter().map(|i| ids[i]).collect();
        assert_eq!(got, brute_force_herding(&ids, &rows, m), "case {case} n={n} m={m}");
    }
}

fn samples(class: usize, n: usize, next_id: &mut u64, rng: &mut sscl_core::rng::LabRng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            *next_id += 1;
            Sample { id: *next_id, features: (0..3).map(|_| gaussian(rng) + class as f64).collect(), label: Some(class) }
        })
        .collect()
}

#[test]
fn buffer_counts_follow_the_quota_law() {
    for run in 0..20 {
        let mut rng = rng_for(run, "buffer-law", 0);
        let capacity = 50;
        let mut buffer = ExemplarBuffer::new(capacity);
        let mut next_id = 0;
        let mut class = 0;
        for _task in 0..8 {
            let previous: BTreeMap<usize, usize> = buffer.per_class().iter().map(|(&c, l)| (c, l.len())).collect();
            let k_new = rng.random_range(1..=3);
            let mut new = BTreeMap::new();
            for _ in 0..k_new {
                let n = rng.random_range(0..=20);
                new.insert(class, samples(class, n, &mut next_id, &mut rng));
                class += 1;
            }
            let available = new.iter().map(|(&c, s)| (c, s.len())).collect();
            buffer.rebalance(&new, |x| Ok(x.clone())).unwrap();
            let got: BTreeMap<usize, usize> = buffer.per_class().iter().map(|(&c, l)| (c, l.len())).collect();
            assert!(buffer.len() <= capacity);
            assert_eq!(got, expected_counts(&previous, &available, capacity), "run {run}");
        }
    }
}

#[test]
fn metrics_match_hand_computation() {
    let mut rng = rng_for(5, "metrics-oracle", 0);
    for _ in 0..50 {
        let t = rng.random_range(1..=10);
        let rows: Vec<Vec<f64>> = (1..=t).map(|r| (0..r).map(|_| rng.random::<f64>()).collect()).collect();
        let m = incremental_metrics(&AccuracyMatrix::from_rows(rows.clone()).unwrap()).unwrap();
        let (avg, last) = hand_metrics(&rows);
        assert!((m.a_avg - avg).abs() <= 1e-12 && (m.a_last - last).abs() <= 1e-12);
    }
}
