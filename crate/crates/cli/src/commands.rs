//! The four subcommands as library functions; `main` only parses flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dmlkit_core::checkpoint::{load_params, save_optimizer, save_params};
use dmlkit_core::data::{
    augment, gen_synthetic, import_folder, split, AugmentMode, Dataset, DatasetManifest, Split,
    SplitMode,
};
use dmlkit_core::eval::RecallReport;
use dmlkit_core::gradsuite::{registry, run_suite, SuiteReport};
use dmlkit_core::model::{AttentionMode, Descriptors};
use dmlkit_core::params::Parameters;
use dmlkit_core::soa::attention_csv;
use dmlkit_core::train::{stack_images, train, EpochMetrics, LossVariant, Trainer};
use dmlkit_core::Tape;
use serde::{Deserialize, Serialize};

use crate::config::{BatchKind, DatasetKind, RunConfig};
use crate::error::CliError;
use crate::svg::{line_chart, Series};

/// Recall cut-offs written after training; values beyond the validation
/// set are dropped.
pub const REPORT_KS: [usize; 4] = [1, 2, 4, 8];

pub const METRICS_HEADER: &str = "epoch,train_loss,ms_component,pa_component,val_recall_at_1";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Builds the dataset named by `cfg` and splits it with `mode`.
pub fn load_data(cfg: &RunConfig, mode: SplitMode) -> Result<(Dataset, Split), CliError> {
    let data = match cfg.dataset {
        DatasetKind::Synthetic => gen_synthetic(
            cfg.num_classes,
            cfg.per_class,
            (cfg.image_height, cfg.image_width),
            cfg.noise_sigma,
            cfg.data_seed,
        )?,
        DatasetKind::Folder => {
            let dir = cfg.data_dir.as_deref().expect("validated");
            import_folder(dir).map_err(CliError::at(dir))?
        }
    };
    let spec = dmlkit_core::data::SplitSpec {
        mode,
        ..cfg.split_spec()
    };
    let parts = split(&data, &spec, cfg.seed)?;
    Ok((data, parts))
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.ms_component, r.pa_component, r.val_recall_at_1
        );
    }
    out
}

/// Recall on the held-out classes: within the test split, or of the query
/// half against the gallery half.
pub fn held_out_recall(
    trainer: &mut Trainer,
    data: &Dataset,
    parts: &Split,
    ks: &[usize],
) -> Result<RecallReport, CliError> {
    if parts.test.is_empty() {
        Ok(trainer.recall_query_gallery(data, &parts.query, &parts.gallery, ks)?)
    } else {
        let max = parts.test.len() - 1;
        if let Some(&k) = ks.iter().find(|&&k| k > max) {
            return Err(CliError::config(
                "k",
                &format!("{k} exceeds the {max} candidates of the held-out split"),
            ));
        }
        Ok(trainer.recall_within(data, &parts.test, ks)?)
    }
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub data: Dataset,
    pub split: Split,
}

/// Trains in memory without writing anything.
pub fn run_training(
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun, CliError> {
    cfg.validate()?;
    let (data, parts) = load_data(cfg, cfg.split_mode)?;
    let (trainer, metrics) = train(
        &data,
        &parts,
        &cfg.model_config()?,
        &cfg.train_config()?,
        on_epoch,
    )?;
    Ok(TrainRun {
        trainer,
        metrics,
        data,
        split: parts,
    })
}

/// Trains and writes `config.toml`, `metrics.csv`, `recall.json`,
/// `model.ckpt`, `optim.ckpt` and `dataset.json` under `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<TrainRun, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join("config.toml"), cfg.to_text())?;
    let mut run = run_training(cfg, |m| {
        log(&format!(
            "epoch {:>3}  loss {:.6}  ms {:.6}  pa {:.6}  val R@1 {:.4}",
            m.epoch, m.train_loss, m.ms_component, m.pa_component, m.val_recall_at_1
        ))
    })?;
    write(&out.join("metrics.csv"), metrics_csv(&run.metrics))?;

    let report = if run.split.val.len() >= 2 {
        run.trainer
            .recall_within(&run.data, &run.split.val, &REPORT_KS)?
    } else {
        RecallReport {
            k_values: Vec::new(),
            recall: Default::default(),
            n_queries: 0,
        }
    };
    write(&out.join("recall.json"), report.to_json()?)?;

    let ckpt = out.join("model.ckpt");
    save_params(
        &ckpt,
        &[
            ("model", &run.trainer.model),
            ("proxies", &run.trainer.proxies),
        ],
    )
    .map_err(CliError::at(&ckpt))?;
    let opt = out.join("optim.ckpt");
    save_optimizer(&opt, &run.trainer.optimizer).map_err(CliError::at(&opt))?;
    let manifest = DatasetManifest::new(&run.data, &run.split);
    write(
        &out.join("dataset.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest is plain data"),
    )?;
    if cfg.dump_attention {
        dump_attention(&mut run, cfg, out)?;
    }
    Ok(run)
}

/// Writes the attention matrix of each branch for the first held-out
/// sample as `attention_<branch>.csv`.
fn dump_attention(run: &mut TrainRun, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let Some(&id) = run.split.test.first().or(run.split.query.first()) else {
        return Ok(());
    };
    if run.trainer.model.soa.is_empty() {
        return Ok(());
    }
    let tcfg = cfg.train_config()?;
    // Eval mode draws no randomness.
    let mut rng = dmlkit_core::rng::seeded(cfg.seed, 0);
    let img = augment(
        &run.data.images[id],
        &tcfg.augment,
        AugmentMode::Eval,
        &mut rng,
    )?;
    let mut tape = Tape::new();
    let vars = run.trainer.model.bind(&mut tape);
    let x = tape.constant(stack_images(&[img.pixels])?);
    let fwd = run.trainer.model.forward(&mut tape, x, &vars)?;
    for (name, maps) in run
        .trainer
        .model
        .branch_names()
        .into_iter()
        .zip(&fwd.attention)
    {
        let csv = attention_csv(&tape, maps[0]);
        write(&out.join(format!("attention_{name}.csv")), csv)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Protocol {
    /// Every held-out sample queries all the others.
    Standard,
    /// Held-out classes split into disjoint query and gallery halves.
    QueryGallery,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::QueryGallery => "query_gallery",
        }
    }
}

/// Rebuilds the model from `cfg`, loads `checkpoint` and reports Recall@K
/// on the held-out classes.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    ks: &[usize],
    protocol: Protocol,
) -> Result<RecallReport, CliError> {
    cfg.validate()?;
    let mode = match protocol {
        Protocol::Standard => SplitMode::ClassDisjoint,
        Protocol::QueryGallery => SplitMode::QueryGallery,
    };
    let (data, parts) = load_data(cfg, mode)?;
    let mut trainer = Trainer::new(
        &cfg.model_config()?,
        &cfg.train_config()?,
        parts.train_classes.clone(),
    )?;
    load_params(
        checkpoint,
        &mut [
            ("model", &mut trainer.model),
            ("proxies", &mut trainer.proxies),
        ],
    )
    .map_err(CliError::at(checkpoint))?;
    held_out_recall(&mut trainer, &data, &parts, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Descriptors,
    Soa,
    Loss,
    Dimension,
    BatchSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Descriptors => "descriptors",
            Axis::Soa => "soa",
            Axis::Loss => "loss",
            Axis::Dimension => "dimension",
            Axis::BatchSize => "batch_size",
        }
    }
}

pub const DIMENSIONS: [usize; 5] = [64, 128, 512, 1024, 2048];
pub const BATCH_SIZES: [usize; 4] = [30, 60, 90, 120];

/// The configs compared along `axis`; everything but the swept field,
/// including the seed, is shared with `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>, CliError> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let out: Vec<(String, RunConfig)> = match axis {
        Axis::Descriptors => [
            ("local", Descriptors::Local),
            ("global", Descriptors::Global),
            ("both", Descriptors::Both),
        ]
        .into_iter()
        .map(|(n, d)| {
            (
                n.to_string(),
                with(&|c| {
                    c.descriptors = d;
                    if c.soa == AttentionMode::SingleHead {
                        c.soa = AttentionMode::On;
                    }
                }),
            )
        })
        .collect(),
        Axis::Soa => [
            ("on", AttentionMode::On),
            ("off", AttentionMode::Off),
            ("single_head", AttentionMode::SingleHead),
        ]
        .into_iter()
        .map(|(n, a)| {
            (
                n.to_string(),
                with(&|c| {
                    c.soa = a;
                    c.descriptors = Descriptors::Both;
                }),
            )
        })
        .collect(),
        Axis::Loss => [LossVariant::Ms, LossVariant::Proxy, LossVariant::Hybrid]
            .into_iter()
            .map(|v| (v.name().to_string(), with(&|c| c.loss = v)))
            .collect(),
        Axis::Dimension => DIMENSIONS
            .into_iter()
            .map(|d| (d.to_string(), with(&|c| c.embedding_dim = d)))
            .collect(),
        Axis::BatchSize => BATCH_SIZES
            .into_iter()
            .map(|b| {
                (
                    b.to_string(),
                    with(&|c| {
                        c.batch_size = b;
                        if c.batch_mode == BatchKind::Balanced {
                            c.balanced_per_class = b / c.balanced_classes.max(1);
                        }
                    }),
                )
            })
            .collect(),
    };
    for (name, c) in &out {
        c.validate()
            .map_err(|e| CliError::Config(format!("ablation variant `{name}`: {e}")))?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub metrics: Vec<EpochMetrics>,
    /// Held-out Recall@1 after the last epoch.
    pub test_recall_at_1: f64,
}

/// Worker cap from `DMLKIT_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DMLKIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

type VariantRun = Result<(Vec<EpochMetrics>, f64), CliError>;

fn run_variant(cfg: &RunConfig) -> VariantRun {
    let mut run = run_training(cfg, |_| {})?;
    let r = held_out_recall(&mut run.trainer, &run.data, &run.split, &[1])?;
    Ok((run.metrics, r.get(1).unwrap_or(f64::NAN)))
}

/// Trains every variant of `axis` on up to `threads` workers. Results keep
/// variant order, so the output does not depend on scheduling.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    threads: usize,
) -> Result<Vec<VariantResult>, CliError> {
    let vs = variants(base, axis)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<VariantRun>>> = Mutex::new((0..vs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, vs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, cfg)) = vs.get(i) else { break };
                let r = run_variant(cfg);
                slots
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("workers joined");
    vs.into_iter()
        .zip(slots)
        .map(|((name, _), r)| {
            let (metrics, test_recall_at_1) = r.expect("every slot filled")?;
            Ok(VariantResult {
                name,
                metrics,
                test_recall_at_1,
            })
        })
        .collect()
}

pub fn ablation_csv(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,epoch,recall_at_1\n");
    for r in results {
        for m in &r.metrics {
            let _ = writeln!(out, "{},{},{}", r.name, m.epoch, m.val_recall_at_1);
        }
    }
    out
}

pub fn ablation_summary_csv(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,final_val_recall_at_1,test_recall_at_1\n");
    for r in results {
        let last = r.metrics.last().map_or(f64::NAN, |m| m.val_recall_at_1);
        let _ = writeln!(out, "{},{},{}", r.name, last, r.test_recall_at_1);
    }
    out
}

pub fn ablation_svg(axis: Axis, results: &[VariantResult]) -> String {
    let series: Vec<Series> = results
        .iter()
        .map(|r| Series {
            name: r.name.clone(),
            points: r
                .metrics
                .iter()
                .map(|m| (m.epoch as f64, m.val_recall_at_1))
                .collect(),
        })
        .collect();
    line_chart(
        &format!("ablation: {}", axis.name()),
        "epoch",
        "Recall@1",
        &series,
    )
}

/// Runs the ablation and writes `ablation_<axis>.csv`, `.svg` and
/// `_summary.csv` under `out`.
pub fn cmd_ablate(
    base: &RunConfig,
    axis: Axis,
    out: &Path,
    threads: usize,
) -> Result<Vec<VariantResult>, CliError> {
    base.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let results = run_ablation(base, axis, threads)?;
    let stem = format!("ablation_{}", axis.name());
    write(&out.join(format!("{stem}.csv")), ablation_csv(&results))?;
    write(
        &out.join(format!("{stem}_summary.csv")),
        ablation_summary_csv(&results),
    )?;
    write(
        &out.join(format!("{stem}.svg")),
        ablation_svg(axis, &results),
    )?;
    Ok(results)
}

/// Runs the finite-difference suite. A failing case is part of the
/// report, not an error; only an unknown `flip_sign` name is.
pub fn cmd_gradcheck(seed: u64, flip_sign: Option<&str>) -> Result<SuiteReport, CliError> {
    if let Some(name) = flip_sign {
        if !registry().iter().any(|c| c.name == name) {
            return Err(CliError::config(
                "flip-sign",
                &format!("no gradient case named `{name}`"),
            ));
        }
    }
    Ok(run_suite(seed, flip_sign)?)
}

pub fn format_suite(report: &SuiteReport) -> String {
    let mut out = String::new();
    for c in &report.cases {
        let _ = writeln!(
            out,
            "{:<20} max_rel_error {:.3e}  coords {:>4}  {}",
            c.name,
            c.max_rel_error,
            c.coords_checked,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = report.cases.iter().filter(|c| !c.passed).count();
    let _ = writeln!(
        out,
        "{} cases, {} failed, tolerance {:e}",
        report.cases.len(),
        failed,
        report.tolerance
    );
    out
}

/// Trainable scalars in the model and the proxy bank.
pub fn param_count(trainer: &Trainer) -> usize {
    trainer.model.param_count() + trainer.proxies.param_count()
}
