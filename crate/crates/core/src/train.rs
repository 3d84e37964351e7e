//! The training loop: augment, embed, score, backpropagate, step.

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, AugmentMode, BatchMode, BatchSampler, Dataset, Split};
use crate::eval::{recall_at_k, RecallReport, RetrievalIndex};
use crate::losses::{hybrid_loss, LossConfig, ProxyBank};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{accumulate_grads, Parameters};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Which objective drives the gradient. The other component is still
/// evaluated and logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ms,
    Proxy,
    #[default]
    Hybrid,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ms => "ms",
            LossVariant::Proxy => "proxy",
            LossVariant::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub variant: LossVariant,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 60,
            batch_mode: BatchMode::Uniform,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            variant: LossVariant::Hybrid,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        self.augment.validate()?;
        self.loss.proxy_anchor.validate()?;
        self.loss.ms.validate()?;
        self.loss.hybrid.validate()?;
        self.optim.validate()
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    /// The objective that was backpropagated.
    pub objective: f64,
    pub ms: f64,
    pub proxy: f64,
}

/// One row of the metrics log. Epochs count from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub ms_component: f64,
    pub pa_component: f64,
    pub val_recall_at_1: f64,
}

/// Stacks `[H,W,C]` images into a `[B,H,W,C]` batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "image shape {:?} in a batch of {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// Images embedded per tape when no gradients are needed.
const EMBED_CHUNK: usize = 64;

pub struct Trainer {
    pub model: Model,
    pub proxies: ProxyBank,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    augment_rng: Rng,
}

impl Trainer {
    /// Fresh model and one proxy per class in `classes`, all derived from
    /// `config.seed`.
    pub fn new(
        model_config: &ModelConfig,
        config: &TrainConfig,
        classes: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let proxies = ProxyBank::with_classes(classes, model.embedding_dim(), config.seed)?;
        Ok(Self {
            model,
            proxies,
            optimizer: AdamW::from_config(&config.optim),
            config: config.clone(),
            augment_rng: rng::seeded(config.seed, rng::stream::AUGMENT),
        })
    }

    fn batch(
        &mut self,
        data: &Dataset,
        ids: &[usize],
        mode: AugmentMode,
    ) -> Result<(Tensor, Vec<usize>)> {
        let mut images = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let img = data
                .images
                .get(id)
                .ok_or_else(|| Error::Data(format!("sample id {id} out of range")))?;
            images.push(augment(img, &self.config.augment, mode, &mut self.augment_rng)?.pixels);
            labels.push(img.class_id);
        }
        Ok((stack_images(&images)?, labels))
    }

    /// One optimizer step on the samples `ids`.
    pub fn step(&mut self, data: &Dataset, ids: &[usize]) -> Result<StepLoss> {
        let (x, labels) = self.batch(data, ids, AugmentMode::Train)?;
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let proxies = tape.leaf(&self.proxies.proxies);
        let xv = tape.constant(x);
        let out = self.model.forward(&mut tape, xv, &vars)?;
        let terms = hybrid_loss(
            &mut tape,
            out.embedding,
            &labels,
            proxies,
            &self.proxies,
            &self.config.loss,
        )?;
        let objective = match self.config.variant {
            LossVariant::Hybrid => terms.total,
            LossVariant::Ms => terms.ms,
            LossVariant::Proxy => terms.proxy,
        };
        let loss = StepLoss {
            objective: tape.item(objective)?,
            ms: tape.item(terms.ms)?,
            proxy: tape.item(terms.proxy)?,
        };
        if !(loss.objective.is_finite() && loss.ms.is_finite() && loss.proxy.is_finite()) {
            return Err(Error::NonFinite {
                what: "training loss".into(),
            });
        }
        let model_vars = vars.vars();
        let grads = tape.backward(objective)?;
        accumulate_grads(&mut self.model, &model_vars, &grads)?;
        grads.accumulate_into(proxies, &mut self.proxies.proxies)?;
        let mut groups = vec![self.model.params_mut(), self.proxies.params_mut()];
        let stepped = self.optimizer.step(&mut groups);
        AdamW::zero_grads(&mut groups);
        stepped?;
        Ok(loss)
    }

    /// Embeddings `[ids.len(), D]` under eval-mode augmentation.
    pub fn embed(&mut self, data: &Dataset, ids: &[usize]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(ids.len() * self.model.embedding_dim());
        for chunk in ids.chunks(EMBED_CHUNK) {
            let (x, _) = self.batch(data, chunk, AugmentMode::Eval)?;
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape);
            let xv = tape.constant(x);
            let out = self.model.forward(&mut tape, xv, &vars)?;
            rows.extend_from_slice(tape.value(out.embedding));
        }
        Ok(Tensor::new([ids.len(), self.model.embedding_dim()], rows)?)
    }

    /// Index over the embeddings of `ids`, keyed by sample id.
    pub fn index(&mut self, data: &Dataset, ids: &[usize]) -> Result<RetrievalIndex> {
        let e = self.embed(data, ids)?;
        let labels = ids.iter().map(|&i| data.images[i].class_id).collect();
        RetrievalIndex::new(&e, labels, ids.to_vec())
    }

    /// Recall@K of `ids` against themselves, each query excluding itself.
    /// Values of `ks` beyond the available candidates are dropped.
    pub fn recall_within(
        &mut self,
        data: &Dataset,
        ids: &[usize],
        ks: &[usize],
    ) -> Result<RecallReport> {
        let ks: Vec<usize> = ks.iter().copied().filter(|&k| k < ids.len()).collect();
        if ks.is_empty() {
            return Err(Error::Data(format!(
                "{} samples are too few to evaluate retrieval",
                ids.len()
            )));
        }
        let index = self.index(data, ids)?;
        recall_at_k(&index, &index, &ks, true)
    }

    /// Recall@K of `query` ids against a disjoint `gallery`.
    pub fn recall_query_gallery(
        &mut self,
        data: &Dataset,
        query: &[usize],
        gallery: &[usize],
        ks: &[usize],
    ) -> Result<RecallReport> {
        let q = self.index(data, query)?;
        let g = self.index(data, gallery)?;
        recall_at_k(&q, &g, ks, false)
    }

    /// One pass over `batches`; batches smaller than 2 are skipped.
    pub fn epoch(&mut self, data: &Dataset, batches: &[Vec<usize>]) -> Result<(StepLoss, usize)> {
        let mut sum = StepLoss {
            objective: 0.0,
            ms: 0.0,
            proxy: 0.0,
        };
        let mut steps = 0;
        for b in batches.iter().filter(|b| b.len() >= 2) {
            let l = self.step(data, b)?;
            sum.objective += l.objective;
            sum.ms += l.ms;
            sum.proxy += l.proxy;
            steps += 1;
        }
        if steps > 0 {
            let n = steps as f64;
            sum.objective /= n;
            sum.ms /= n;
            sum.proxy /= n;
        }
        Ok((sum, steps))
    }
}

/// Trains on `split.train` for `config.epochs`, logging validation
/// Recall@1 after every epoch. A non-finite loss is reported with its
/// epoch.
pub fn train(
    data: &Dataset,
    split: &Split,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model_config, config, split.train_classes.clone())?;
    let labels = split
        .train
        .iter()
        .map(|&i| data.images[i].class_id)
        .collect();
    let mut sampler = BatchSampler::new(
        split.train.clone(),
        labels,
        config.batch_size,
        config.batch_mode,
        config.seed,
    )?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = sampler.epoch();
        let (loss, steps) = trainer.epoch(data, &batches).map_err(|e| match e {
            Error::NonFinite { what } => Error::NonFinite {
                what: format!("{what} in epoch {epoch}"),
            },
            Error::Tensor(crate::TensorError::NonFinite { op }) => Error::NonFinite {
                what: format!("value from `{op}` in epoch {epoch}"),
            },
            other => other,
        })?;
        if steps == 0 {
            return Err(Error::Data(
                "no training batch holds at least 2 samples".into(),
            ));
        }
        let val = if split.val.len() >= 2 {
            trainer
                .recall_within(data, &split.val, &[1])?
                .get(1)
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let row = EpochMetrics {
            epoch,
            train_loss: loss.objective,
            ms_component: loss.ms,
            pa_component: loss.proxy,
            val_recall_at_1: val,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, ConvSpec};
    use crate::data::{gen_synthetic, split, SplitSpec};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_height: 8,
                input_width: 8,
                in_channels: 3,
                kernel: 3,
                local_stage: vec![ConvSpec {
                    channels: 4,
                    stride: 2,
                }],
                global_stage: vec![ConvSpec {
                    channels: 6,
                    stride: 2,
                }],
            },
            embedding_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            augment: AugmentConfig {
                resize: 10,
                crop: 8,
                flip_prob: 0.5,
            },
            optim: OptimConfig {
                lr_model: 1e-3,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let d = gen_synthetic(4, 10, (8, 8), 0.1, 0).unwrap();
        let s = split(&d, &SplitSpec::default(), 0).unwrap();
        let (t1, log1) = train(&d, &s, &tiny_model(), &tiny_train(2), |_| {}).unwrap();
        let (t2, log2) = train(&d, &s, &tiny_model(), &tiny_train(2), |_| {}).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(t1.model, t2.model);
        assert_eq!(log1.len(), 2);
        assert_eq!(log1[1].epoch, 2);
        assert!(log1
            .iter()
            .all(|r| r.train_loss.is_finite() && r.val_recall_at_1 >= 0.0));
        assert_eq!(t1.optimizer.step_count(), 4);
    }

    #[test]
    fn zero_epochs_keeps_initial_params() {
        let d = gen_synthetic(4, 10, (8, 8), 0.1, 0).unwrap();
        let s = split(&d, &SplitSpec::default(), 0).unwrap();
        let (t, log) = train(&d, &s, &tiny_model(), &tiny_train(0), |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(t.model, Model::new(&tiny_model(), 0).unwrap());
    }

    #[test]
    fn variants_drive_different_updates() {
        let d = gen_synthetic(4, 10, (8, 8), 0.1, 0).unwrap();
        let s = split(&d, &SplitSpec::default(), 0).unwrap();
        let mut models = Vec::new();
        for variant in [LossVariant::Ms, LossVariant::Proxy, LossVariant::Hybrid] {
            let cfg = TrainConfig {
                variant,
                ..tiny_train(1)
            };
            models.push(train(&d, &s, &tiny_model(), &cfg, |_| {}).unwrap().0.model);
        }
        assert_ne!(models[0], models[1]);
        assert_ne!(models[1], models[2]);
    }
}
