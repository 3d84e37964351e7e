//! Independent scalar-loop references shared by the integration tests and
//! the acceptance gate.
#![allow(dead_code)]

use dmlkit_core::rng::{normal_vec, Rng};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Proxy-anchor loss, one loop per proxy.
pub fn naive_proxy_anchor(
    x: &[Vec<f64>],
    labels: &[usize],
    proxies: &[Vec<f64>],
    classes: &[usize],
    alpha: f64,
    delta: f64,
) -> f64 {
    let mut pos_sum = 0.0;
    let mut with_pos = 0usize;
    let mut neg_sum = 0.0;
    for (p, proxy) in proxies.iter().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut any_pos = false;
        for (xi, &l) in x.iter().zip(labels) {
            let s = cosine(xi, proxy);
            if l == classes[p] {
                any_pos = true;
                pos += (-alpha * (s - delta)).exp();
            } else {
                neg += (alpha * (s + delta)).exp();
            }
        }
        if any_pos {
            with_pos += 1;
            pos_sum += (1.0 + pos).ln();
        }
        neg_sum += (1.0 + neg).ln();
    }
    pos_sum / with_pos as f64 + neg_sum / proxies.len() as f64
}

/// Multi-similarity loss, one loop per anchor. `margin` is the offset added
/// to the similarity in the negative exponent.
pub fn naive_ms(
    x: &[Vec<f64>],
    labels: &[usize],
    gamma: f64,
    beta: f64,
    sigma: f64,
    margin: f64,
) -> f64 {
    let m = x.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for k in 0..m {
            let s = cosine(&x[i], &x[k]);
            if k != i && labels[k] == labels[i] {
                pos += (-gamma * (s - sigma)).exp();
            } else if labels[k] != labels[i] {
                neg += (beta * (s + margin)).exp();
            }
        }
        total += (1.0 + pos).ln() / gamma + (1.0 + neg).ln() / beta;
    }
    total / m as f64
}

/// A query hits at `k` when fewer than `k` candidates rank ahead of its
/// best same-label candidate. Ties go to the lower index.
pub fn brute_force_recall(
    q: &[Vec<f64>],
    ql: &[usize],
    g: &[Vec<f64>],
    gl: &[usize],
    ks: &[usize],
    same_set: bool,
) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    for (i, query) in q.iter().enumerate() {
        let sims: Vec<(usize, f64)> = g
            .iter()
            .enumerate()
            .filter(|&(j, _)| !(same_set && i == j))
            .map(|(j, c)| (j, cosine(query, c)))
            .collect();
        let mut best_rank = None;
        for &(j, s) in &sims {
            if gl[j] != ql[i] {
                continue;
            }
            let ahead = sims
                .iter()
                .filter(|&&(o, t)| t > s || (t == s && o < j))
                .count();
            best_rank = Some(best_rank.map_or(ahead, |r: usize| r.min(ahead)));
        }
        if let Some(r) = best_rank {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if r < k {
                    *h += 1;
                }
            }
        }
    }
    hits.iter().map(|&h| h as f64 / q.len() as f64).collect()
}

pub fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(rng, d, 1.0)).collect()
}

/// Gram-Schmidt on a Gaussian matrix: a random orthogonal `d x d` map,
/// one basis vector per row.
pub fn random_rotation(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = normal_vec(rng, d, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

pub fn rotate(rows: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| {
            r.iter()
                .map(|col| col.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}
