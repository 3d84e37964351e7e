//! Both losses against direct scalar-loop evaluations of their definitions.

use dmlkit_core::losses::{
    ms_loss, proxy_anchor_loss, MarginSign, MsConfig, ProxyAnchorConfig, ProxyBank,
};
use dmlkit_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{naive_ms, naive_proxy_anchor};

fn flat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, usize, usize) {
    let b = rng.random_range(2..=8);
    let classes = rng.random_range(1..=4);
    let d = rng.random_range(2..=16);
    let x: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    (x, labels, classes, d)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn proxy_anchor_matches_scalar_loops_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ProxyAnchorConfig::default();
    for case in 0..100 {
        let (x, labels, classes, d) = random_batch(&mut rng);
        let proxies: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let class_ids: Vec<usize> = (0..classes).collect();
        let want = naive_proxy_anchor(&x, &labels, &proxies, &class_ids, cfg.alpha, cfg.delta);

        let bank = ProxyBank::new(flat(&proxies), class_ids).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(flat(&x));
        let pv = tape.constant(bank.proxies.clone());
        let loss = proxy_anchor_loss(&mut tape, xv, &labels, pv, &bank, &cfg).unwrap();
        let got = tape.item(loss).unwrap();
        assert!(rel_close(got, want, 1e-10), "case {case}: {got} vs {want}");
    }
}

#[test]
fn ms_matches_scalar_loops_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = MsConfig::default();
    assert_eq!(cfg.negative_margin_sign, MarginSign::Plus);
    for case in 0..100 {
        let (x, labels, _, _) = random_batch(&mut rng);
        let want = naive_ms(&x, &labels, cfg.gamma, cfg.beta, cfg.sigma, cfg.sigma);
        let mut tape = Tape::new();
        let xv = tape.constant(flat(&x));
        let loss = ms_loss(&mut tape, xv, &labels, &cfg).unwrap();
        let got = tape.item(loss).unwrap();
        assert!(rel_close(got, want, 1e-10), "case {case}: {got} vs {want}");
    }
}

#[test]
fn minus_margin_flips_the_negative_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = MsConfig {
        negative_margin_sign: MarginSign::Minus,
        ..MsConfig::default()
    };
    for _ in 0..20 {
        let (x, labels, _, _) = random_batch(&mut rng);
        let want = naive_ms(&x, &labels, cfg.gamma, cfg.beta, cfg.sigma, -cfg.sigma);
        let mut tape = Tape::new();
        let xv = tape.constant(flat(&x));
        let loss = ms_loss(&mut tape, xv, &labels, &cfg).unwrap();
        let got = tape.item(loss).unwrap();
        assert!(rel_close(got, want, 1e-10), "{got} vs {want}");
    }
}

#[test]
fn proxy_anchor_at_margin_is_log_two() {
    let cfg = ProxyAnchorConfig::default();
    let x = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let p = Tensor::new(
        [1, 2],
        vec![cfg.delta, (1.0 - cfg.delta * cfg.delta).sqrt()],
    )
    .unwrap();
    let bank = ProxyBank::new(p.clone(), vec![0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pv = tape.constant(p);
    let loss = proxy_anchor_loss(&mut tape, xv, &[0], pv, &bank, &cfg).unwrap();
    let got = tape.item(loss).unwrap();
    assert!((got - 2f64.ln()).abs() <= 1e-12, "{got}");
}

#[test]
fn ms_at_margin_is_log_two_over_gamma() {
    let cfg = MsConfig::default();
    // Identical rows give S = 1 = sigma on the only positive pair.
    let x = Tensor::new([2, 3], vec![0.6, 0.0, 0.8, 0.6, 0.0, 0.8]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let loss = ms_loss(&mut tape, xv, &[4, 4], &cfg).unwrap();
    let got = tape.item(loss).unwrap();
    assert!((got - 2f64.ln() / cfg.gamma).abs() <= 1e-12, "{got}");
}
