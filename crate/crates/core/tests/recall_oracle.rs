//! Recall@K against an all-pairs count, and under common rotations.

use dmlkit_core::eval::{recall_at_k, RetrievalIndex};
use dmlkit_core::rng::seeded;
use dmlkit_core::Tensor;
use rand::Rng;

mod support;
use support::{brute_force_recall, random_rotation, random_rows, rotate};

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn ks_for(n: usize) -> Vec<usize> {
    [1, 2, 4, 8, 16].into_iter().filter(|&k| k <= n).collect()
}

#[test]
fn within_set_recall_matches_brute_force_on_100_instances() {
    let mut rng = seeded(7, 1);
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let d = rng.random_range(1..=32);
        let classes = rng.random_range(1..=10);
        let x = random_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let ks = ks_for(n - 1);
        let want = brute_force_recall(&x, &labels, &x, &labels, &ks, true);

        let index = RetrievalIndex::from_rows(&rows_tensor(&x), labels.clone()).unwrap();
        let report = recall_at_k(&index, &index, &ks, true).unwrap();
        let got: Vec<f64> = ks.iter().map(|&k| report.get(k).unwrap()).collect();
        assert_eq!(got, want, "case {case}: n={n} d={d}");

        let rot = random_rotation(&mut rng, d);
        let turned = RetrievalIndex::from_rows(&rows_tensor(&rotate(&x, &rot)), labels).unwrap();
        let rotated = recall_at_k(&turned, &turned, &ks, true).unwrap();
        assert_eq!(rotated, report, "case {case}: rotation changed recall");
    }
}

#[test]
fn query_gallery_recall_matches_brute_force() {
    let mut rng = seeded(8, 1);
    for case in 0..30 {
        let nq = rng.random_range(1..=60);
        let ng = rng.random_range(1..=60);
        let d = rng.random_range(1..=16);
        let classes = rng.random_range(1..=5);
        let q = random_rows(&mut rng, nq, d);
        let g = random_rows(&mut rng, ng, d);
        let ql: Vec<usize> = (0..nq).map(|_| rng.random_range(0..classes)).collect();
        let gl: Vec<usize> = (0..ng).map(|_| rng.random_range(0..classes)).collect();
        let ks = ks_for(ng);
        let want = brute_force_recall(&q, &ql, &g, &gl, &ks, false);
        let qi = RetrievalIndex::new(&rows_tensor(&q), ql, (0..nq).collect()).unwrap();
        let gi = RetrievalIndex::new(&rows_tensor(&g), gl, (1000..1000 + ng).collect()).unwrap();
        let report = recall_at_k(&qi, &gi, &ks, false).unwrap();
        let got: Vec<f64> = ks.iter().map(|&k| report.get(k).unwrap()).collect();
        assert_eq!(got, want, "case {case}");
    }
}

#[test]
fn recall_is_monotone_in_k() {
    let mut rng = seeded(9, 1);
    for _ in 0..20 {
        let n = rng.random_range(17..=120);
        let x = random_rows(&mut rng, n, 8);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let index = RetrievalIndex::from_rows(&rows_tensor(&x), labels).unwrap();
        let ks = ks_for(n - 1);
        let r = recall_at_k(&index, &index, &ks, true).unwrap();
        let vals: Vec<f64> = ks.iter().map(|&k| r.get(k).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
    }
}
