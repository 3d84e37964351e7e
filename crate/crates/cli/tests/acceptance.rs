//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Tolerances are pinned below.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dmlkit::commands::{
    cmd_ablate, cmd_eval, cmd_train, worker_count, Axis, Protocol, VariantResult,
};
use dmlkit::RunConfig;
use dmlkit_core::eval::{recall_at_k, RetrievalIndex};
use dmlkit_core::gradsuite::run_suite;
use dmlkit_core::losses::{ms_loss, proxy_anchor_loss, MsConfig, ProxyAnchorConfig, ProxyBank};
use dmlkit_core::params::Parameters;
use dmlkit_core::rng::{normal_vec, seeded};
use dmlkit_core::soa::{attention_map, init_soa, soa_forward, SoaConfig};
use dmlkit_core::{Tape, Tensor};
use rand::Rng;

#[path = "../../core/tests/support/mod.rs"]
mod support;
use support::{
    brute_force_recall, naive_ms, naive_proxy_anchor, random_rotation, random_rows, rotate,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 120.0;
const LOSS_ORACLE_TOL: f64 = 1e-10;
const LOSS_HAND_TOL: f64 = 1e-12;
const SOA_ROW_TOL: f64 = 1e-12;
const UNIFORM_TOL: f64 = 1e-12;
const RECALL_THRESHOLD: f64 = 0.95;
const TRAIN_BUDGET_SECS: f64 = 600.0;
const HYBRID_SLACK: f64 = 0.03;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new([rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(0, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let fault = run_suite(0, Some("ms_loss")).unwrap();
    let caught = fault.cases.iter().any(|c| c.name == "ms_loss" && !c.passed);
    let passed =
        report.tolerance == GRAD_TOL && report.all_passed() && caught && secs < GRAD_BUDGET_SECS;
    outcome(
        passed,
        format!(
            "{} cases, worst {} at {:.2e} (tol {GRAD_TOL:e}), flipped ms_loss caught: {caught}, {secs:.1}s",
            report.cases.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn loss_oracles() -> Outcome {
    let mut rng = seeded(100, 1);
    let pa_cfg = ProxyAnchorConfig::default();
    let ms_cfg = MsConfig::default();
    let (mut worst_pa, mut worst_ms) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let b = rng.random_range(2..=8);
        let classes = rng.random_range(1..=4);
        let d = rng.random_range(2..=16);
        let x = random_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let proxies = random_rows(&mut rng, classes, d);
        let ids: Vec<usize> = (0..classes).collect();
        let bank = ProxyBank::new(tensor(&proxies), ids.clone()).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&x));
        let pv = tape.constant(bank.proxies.clone());
        let pa = proxy_anchor_loss(&mut tape, xv, &labels, pv, &bank, &pa_cfg).unwrap();
        let ms = ms_loss(&mut tape, xv, &labels, &ms_cfg).unwrap();
        let want_pa = naive_proxy_anchor(&x, &labels, &proxies, &ids, pa_cfg.alpha, pa_cfg.delta);
        let want_ms = naive_ms(
            &x,
            &labels,
            ms_cfg.gamma,
            ms_cfg.beta,
            ms_cfg.sigma,
            ms_cfg.sigma,
        );
        worst_pa = worst_pa.max((tape.item(pa).unwrap() - want_pa).abs());
        worst_ms = worst_ms.max((tape.item(ms).unwrap() - want_ms).abs());
    }

    // One sample at similarity delta to its own proxy, no negatives.
    let p = Tensor::new(
        [1, 2],
        vec![pa_cfg.delta, (1.0 - pa_cfg.delta * pa_cfg.delta).sqrt()],
    )
    .unwrap();
    let bank = ProxyBank::new(p.clone(), vec![0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
    let pv = tape.constant(p);
    let l = proxy_anchor_loss(&mut tape, xv, &[0], pv, &bank, &pa_cfg).unwrap();
    let hand_pa = (tape.item(l).unwrap() - 2f64.ln()).abs();
    // Two identical same-class rows: similarity 1 = sigma, no negatives.
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new([2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap());
    let l = ms_loss(&mut tape, xv, &[1, 1], &ms_cfg).unwrap();
    let hand_ms = (tape.item(l).unwrap() - 2f64.ln() / ms_cfg.gamma).abs();

    let passed = worst_pa <= LOSS_ORACLE_TOL
        && worst_ms <= LOSS_ORACLE_TOL
        && hand_pa <= LOSS_HAND_TOL
        && hand_ms <= LOSS_HAND_TOL;
    outcome(
        passed,
        format!(
            "100 batches: proxy-anchor max |diff| {worst_pa:.1e}, ms {worst_ms:.1e} (tol {LOSS_ORACLE_TOL:e}); \
             hand cases {hand_pa:.1e}, {hand_ms:.1e} (tol {LOSS_HAND_TOL:e})"
        ),
    )
}

fn soa_properties() -> Outcome {
    let mut rng = seeded(300, 1);
    let (mut worst_row, mut worst_uniform) = (0.0f64, 0.0f64);
    let mut exact = true;
    for i in 0..50 {
        let (b, h, w) = (
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        );
        let c = rng.random_range(1..=6);
        let d = rng.random_range(1..=c);
        let mut p = init_soa(c, SoaConfig { zeta: 1.0, d }, i).unwrap();
        p.visit_mut("", &mut |_, t| {
            let v = normal_vec(&mut rng, t.numel(), 0.7);
            t.data_mut().copy_from_slice(&v);
        });
        let map = Tensor::new([b, h, w, c], normal_vec(&mut rng, b * h * w * c, 1.0)).unwrap();

        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let f = tape.constant(map.clone());
        for a in attention_map(&mut tape, f, &vars).unwrap() {
            for row in tape.value(a).chunks(h * w) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }

        let mut zero_phi = p.clone();
        zero_phi.wphi.data_mut().fill(0.0);
        zero_phi.bphi.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = zero_phi.bind(&mut tape);
        let f = tape.constant(map.clone());
        let out = soa_forward(&mut tape, f, &vars).unwrap();
        exact &= tape
            .value(out.output)
            .iter()
            .zip(map.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());

        let mut flat = p.clone();
        flat.config.zeta = 0.0;
        let mut tape = Tape::new();
        let vars = flat.bind(&mut tape);
        let f = tape.constant(map);
        for a in attention_map(&mut tape, f, &vars).unwrap() {
            let u = 1.0 / (h * w) as f64;
            worst_uniform = tape
                .value(a)
                .iter()
                .fold(worst_uniform, |m, v| m.max((v - u).abs()));
        }
    }
    let passed = worst_row <= SOA_ROW_TOL && exact && worst_uniform <= UNIFORM_TOL;
    outcome(
        passed,
        format!(
            "50 shapes: row-sum error {worst_row:.1e} (tol {SOA_ROW_TOL:e}), zero-phi residual bitwise: {exact}, \
             zeta=0 deviation {worst_uniform:.1e}"
        ),
    )
}

fn recall_oracle() -> Outcome {
    let mut rng = seeded(400, 1);
    let (mut agree, mut invariant) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let d = rng.random_range(1..=32);
        let classes = rng.random_range(1..=10);
        let x = random_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
        let want = brute_force_recall(&x, &labels, &x, &labels, &ks, true);
        let index = RetrievalIndex::from_rows(&tensor(&x), labels.clone()).unwrap();
        let report = recall_at_k(&index, &index, &ks, true).unwrap();
        let got: Vec<f64> = ks.iter().map(|&k| report.get(k).unwrap()).collect();
        agree += usize::from(got == want);
        let rot = random_rotation(&mut rng, d);
        let turned = RetrievalIndex::from_rows(&tensor(&rotate(&x, &rot)), labels).unwrap();
        invariant += usize::from(recall_at_k(&turned, &turned, &ks, true).unwrap() == report);
    }
    outcome(
        agree == 100 && invariant == 100,
        format!("exact agreement {agree}/100, rotation invariant {invariant}/100"),
    )
}

fn acceptance_config() -> RunConfig {
    RunConfig {
        embedding_dim: 32,
        ..RunConfig::default()
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok())
        .map(|n| n.to_string())
        .collect()
}

fn convergence(cfg: &RunConfig, out: &Path) -> Outcome {
    let start = Instant::now();
    let run = cmd_train(cfg, out, |l| eprintln!("  {l}")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let report = cmd_eval(cfg, &out.join("model.ckpt"), &[1], Protocol::Standard).unwrap();
    let r1 = report.get(1).unwrap();
    let first = run.metrics.first().map_or(f64::NAN, |m| m.train_loss);
    let last = run.metrics.last().map_or(f64::NAN, |m| m.train_loss);
    outcome(
        r1 >= RECALL_THRESHOLD && last < first && secs <= TRAIN_BUDGET_SECS,
        format!(
            "held-out Recall@1 {r1:.4} (threshold {RECALL_THRESHOLD}, {} queries), train loss {first:.4} -> {last:.4}, {secs:.0}s",
            report.n_queries
        ),
    )
}

fn xml_polylines(svg: &str) -> Option<usize> {
    let doc = roxmltree::Document::parse(svg).ok()?;
    Some(
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count(),
    )
}

fn check_ablation(
    out: &Path,
    axis: Axis,
    results: &[VariantResult],
    epochs: usize,
) -> (bool, String) {
    let stem = format!("ablation_{}", axis.name());
    let csv = fs::read_to_string(out.join(format!("{stem}.csv"))).unwrap_or_default();
    let svg = fs::read_to_string(out.join(format!("{stem}.svg"))).unwrap_or_default();
    let rows = csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').count() == 3)
        .count();
    let csv_ok = csv.starts_with("variant,epoch,recall_at_1\n") && rows == results.len() * epochs;
    let lines = xml_polylines(&svg);
    let svg_ok = lines == Some(results.len());
    let finals: Vec<String> = results
        .iter()
        .map(|r| format!("{} {:.4}", r.name, r.test_recall_at_1))
        .collect();
    (
        csv_ok && svg_ok,
        format!(
            "{}: csv {rows} rows, svg polylines {lines:?}, final R@1 [{}]",
            axis.name(),
            finals.join(", ")
        ),
    )
}

fn ablations(cfg: &RunConfig, out: &Path) -> Outcome {
    let threads = worker_count();
    let loss = cmd_ablate(cfg, Axis::Loss, out, threads).unwrap();
    let soa = cmd_ablate(cfg, Axis::Soa, out, threads).unwrap();
    let (loss_ok, loss_detail) = check_ablation(out, Axis::Loss, &loss, cfg.epochs);
    let (soa_ok, soa_detail) = check_ablation(out, Axis::Soa, &soa, cfg.epochs);
    let of = |n: &str| {
        loss.iter()
            .find(|r| r.name == n)
            .map_or(f64::NAN, |r| r.test_recall_at_1)
    };
    let hybrid = of("hybrid");
    let directional = hybrid >= of("ms") - HYBRID_SLACK && hybrid >= of("proxy") - HYBRID_SLACK;
    outcome(
        loss_ok && soa_ok && directional,
        format!(
            "{loss_detail}; {soa_detail}; hybrid >= single-loss - {HYBRID_SLACK}: {directional}"
        ),
    )
}

fn determinism(cfg: &RunConfig, first: &Path, second: &Path) -> Outcome {
    cmd_train(cfg, second, |_| {}).unwrap();
    let files = [
        "metrics.csv",
        "model.ckpt",
        "model.ckpt.json",
        "optim.ckpt",
        "optim.ckpt.json",
        "recall.json",
    ];
    let differing = same_files(first, second, &files);
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files bit-identical across two runs", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = acceptance_config();
    let (run_a, run_b, abl) = (
        dir.path().join("run_a"),
        dir.path().join("run_b"),
        dir.path().join("ablate"),
    );

    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("loss oracles", Box::new(loss_oracles)),
        ("SOA properties", Box::new(soa_properties)),
        ("Recall@K oracle", Box::new(recall_oracle)),
        (
            "end-to-end convergence",
            Box::new(|| convergence(&cfg, &run_a)),
        ),
        ("ablation harness", Box::new(|| ablations(&cfg, &abl))),
        (
            "determinism",
            Box::new(|| determinism(&cfg, &run_a, &run_b)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let o = check();
        failed += usize::from(!o.passed);
        println!(
            "{} {}. {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
