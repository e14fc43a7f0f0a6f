//! Episodic training of the in-context model under frozen, delayed or joint
//! encoder regimes.

mod checkpoint;
mod schedule;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shotlab_tensor::{AdamW, AdamWConfig, Scalar, Tape, Tensor};

pub use checkpoint::{
    load_checkpoint, load_encoder, save_checkpoint, save_encoder, sidecar_path, CheckpointMeta,
    FORMAT_VERSION,
};
pub use schedule::{
    format_regime, regime_lrs, scheduled_lr, EncoderFamily, EncoderMode, LrMode, RegimeConfig,
    ScheduleParams,
};

use crate::datasets::{AugmentParams, Image, LabeledImageSet, Mode};
use crate::encoders::Encoder;
use crate::episodes::{batch_episodes, sample_episode, Episode};
use crate::error::{validation, Error, Result};
use crate::evaluation::{evaluate, IclPredictor};
use crate::icl::IclModel;
use crate::seed::{derive_rng, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    /// Episodes per optimizer step, split evenly over `accumulation_steps`.
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub n: usize,
    pub k: usize,
    pub n_max: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub label_smoothing: f64,
    pub schedule: ScheduleParams,
    pub regime: RegimeConfig,
    /// Apply training-mode blur and sharpness to episode images.
    pub augment_episodes: bool,
    pub augment: AugmentParams,
    pub val_every: usize,
    pub val_episodes: usize,
    pub seed: u64,
    /// Include wall-clock seconds in the epoch records.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            samples_per_epoch: 1000,
            batch_size: 8,
            accumulation_steps: 1,
            n: 5,
            k: 5,
            n_max: 10,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            label_smoothing: 0.1,
            schedule: ScheduleParams::default(),
            regime: RegimeConfig::default(),
            augment_episodes: true,
            augment: AugmentParams::default(),
            val_every: 5,
            val_episodes: 200,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(validation("epochs, batch_size and accumulation_steps must be positive"));
        }
        if self.batch_size % self.accumulation_steps != 0 {
            return Err(validation("batch_size must be divisible by accumulation_steps"));
        }
        if self.samples_per_epoch < self.batch_size {
            return Err(validation("samples_per_epoch must hold at least one batch"));
        }
        if self.n == 0 || self.k == 0 || self.n > self.n_max {
            return Err(validation("episodes need 1 <= n <= n_max and k >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(validation("label smoothing must be in [0, 1)"));
        }
        if self.val_every == 0 {
            return Err(validation("val_every must be positive"));
        }
        self.schedule.validate()?;
        self.regime.validate()?;
        self.augment.validate()
    }

    /// Optimizer steps per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr_body: f64,
    pub lr_encoder: f64,
    pub encoder_trainable: bool,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

/// Gradients of one optimizer step.
pub struct StepGradients<T> {
    pub loss: f64,
    pub model: Vec<Option<Tensor<T>>>,
    pub encoder: Option<Vec<Option<Tensor<T>>>>,
}

fn accumulate<T: Scalar>(into: &mut Vec<Option<Tensor<T>>>, add: Vec<Option<Tensor<T>>>) {
    if into.is_empty() {
        *into = add;
        return;
    }
    for (dst, src) in into.iter_mut().zip(add) {
        match (dst.as_mut(), src) {
            (Some(d), Some(s)) => d.add_assign(&s),
            (None, Some(s)) => *dst = Some(s),
            _ => {}
        }
    }
}

/// Encoder outputs for every item of a set, valid while the encoder is
/// frozen and images are not augmented.
pub struct EmbeddingCache<T> {
    rows: HashMap<String, usize>,
    table: Tensor<T>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn build(encoder: &Encoder<T>, set: &LabeledImageSet) -> Result<Self> {
        let images: Vec<&Image> = set.items().iter().map(|i| &*i.image).collect();
        let table = encoder.encode_chunked(&images, 256)?;
        let rows = set.items().iter().enumerate().map(|(r, i)| (i.id.clone(), r)).collect();
        Ok(EmbeddingCache { rows, table })
    }

    fn lookup(&self, episodes: &[Episode]) -> Result<Tensor<T>> {
        let d = self.table.cols();
        let mut data = Vec::new();
        for e in episodes {
            for item in e.supports.iter().chain(std::iter::once(&e.query)) {
                let r = *self
                    .rows
                    .get(&item.id)
                    .ok_or_else(|| validation(format!("item {} is not cached", item.id)))?;
                data.extend_from_slice(self.table.row(r));
            }
        }
        Ok(Tensor::new(vec![data.len() / d, d], data))
    }
}

/// Loss and gradients for `episodes`, processed as `accumulation_steps`
/// equal micro-batches whose losses are each scaled by
/// `1 / accumulation_steps`. The returned loss is the mean over episodes.
pub fn step_gradients<T: Scalar>(
    model: &IclModel<T>,
    encoder: &Encoder<T>,
    episodes: &[Episode],
    accumulation_steps: usize,
    encoder_trainable: bool,
    label_smoothing: f64,
    dropout_seed: u64,
) -> Result<StepGradients<T>> {
    step_with_cache(model, encoder, None, episodes, accumulation_steps, encoder_trainable, label_smoothing, dropout_seed)
}

#[allow(clippy::too_many_arguments)]
fn step_with_cache<T: Scalar>(
    model: &IclModel<T>,
    encoder: &Encoder<T>,
    cache: Option<&EmbeddingCache<T>>,
    episodes: &[Episode],
    accumulation_steps: usize,
    encoder_trainable: bool,
    label_smoothing: f64,
    dropout_seed: u64,
) -> Result<StepGradients<T>> {
    if episodes.is_empty() || episodes.len() % accumulation_steps != 0 {
        return Err(validation("episode count must be a positive multiple of accumulation_steps"));
    }
    let micro = episodes.len() / accumulation_steps;
    let scale = T::from_f64(1.0 / accumulation_steps as f64);
    let mut total = 0.0;
    let mut model_grads = Vec::new();
    let mut enc_grads = Vec::new();
    for (i, chunk) in episodes.chunks(micro).enumerate() {
        let batch = batch_episodes(chunk.to_vec())?;
        let mut tape = Tape::new();
        let pm = tape.bind(&model.params, true);
        let pe = encoder_trainable.then(|| tape.bind(&encoder.params, true));
        let mut rng = derive_rng(dropout_seed, "dropout", &[i as u64]);
        let out = match cache.filter(|_| !encoder_trainable) {
            Some(c) => {
                let emb = tape.constant(c.lookup(chunk)?);
                let slots: Vec<usize> = chunk.iter().flat_map(Episode::support_slots).collect();
                model.forward(&mut tape, &pm, emb, &slots, batch.batch_size(), batch.m(), Some(&mut rng))
            }
            None => model.forward_batch(&mut tape, &pm, encoder, pe.as_ref(), &batch, Some(&mut rng))?,
        };
        let ce = tape.cross_entropy(out.logits, &batch.query_slots(), label_smoothing);
        let loss = tape.scale(ce, scale);
        total += tape.value(loss).data()[0].as_f64();
        let mut grads = tape.backward(loss);
        accumulate(&mut model_grads, pm.grads(&mut grads));
        if let Some(pe) = &pe {
            accumulate(&mut enc_grads, pe.grads(&mut grads));
        }
    }
    Ok(StepGradients {
        loss: total,
        model: model_grads,
        encoder: encoder_trainable.then_some(enc_grads),
    })
}

/// State handed to the per-epoch observer.
pub struct EpochView<'a, T: Scalar> {
    pub metrics: &'a EpochMetrics,
    pub model: &'a IclModel<T>,
    pub encoder: &'a Encoder<T>,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: IclModel<T>,
    pub encoder: Encoder<T>,
    pub history: Vec<EpochMetrics>,
    /// Epoch and accuracy of the best validation pass.
    pub best: Option<(usize, f64)>,
}

/// Where and how checkpoints are written during training.
pub struct CheckpointPlan<'a> {
    pub dir: &'a Path,
    pub regime_code: String,
}

/// Trains `model` (and, when the regime allows, `encoder`) on episodes from
/// `train`, validating on `val` every `val_every` epochs and at the end.
pub fn train_icl<T: Scalar>(
    mut model: IclModel<T>,
    mut encoder: Encoder<T>,
    train: &LabeledImageSet,
    val: Option<&LabeledImageSet>,
    config: &TrainConfig,
    checkpoints: Option<&CheckpointPlan<'_>>,
    mut on_epoch: impl FnMut(EpochView<'_, T>),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if model.config.n_max != config.n_max {
        return Err(validation(format!(
            "model has {} label slots, training uses {}",
            model.config.n_max, config.n_max
        )));
    }
    if encoder.embed_dim() != model.config.embed_dim {
        return Err(validation("encoder and model embedding widths differ"));
    }
    let augment = config.augment_episodes.then(|| AugmentParams {
        target_size: encoder.input_size(),
        ..config.augment.clone()
    });
    let opt_cfg = AdamWConfig {
        beta1: config.betas.0,
        beta2: config.betas.1,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut model_opt = AdamW::new(opt_cfg, &model.params);
    let mut enc_opt = AdamW::new(opt_cfg, &encoder.params);
    let val_seed = derive_seed(config.seed, "validation", &[]);
    let regime_code = checkpoints.map(|c| c.regime_code.clone());
    let started = Instant::now();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut cache: Option<EmbeddingCache<T>> = None;

    for epoch in 1..=config.epochs {
        let (lr_body, lr_encoder, trainable) = regime_lrs(&config.regime, &config.schedule, epoch);
        encoder.trainable = trainable;
        if trainable {
            cache = None;
        } else if augment.is_none() && cache.is_none() {
            cache = Some(EmbeddingCache::build(&encoder, train)?);
        }
        let steps = config.steps_per_epoch();
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let batch_seed = derive_seed(config.seed, "train-batch", &[epoch as u64, step as u64]);
            let episodes = (0..config.batch_size)
                .map(|j| {
                    let mut rng = derive_rng(batch_seed, "episode", &[j as u64]);
                    let e = sample_episode(train, config.n, config.k, config.n_max, &mut rng)?;
                    match &augment {
                        Some(a) => e.preprocessed(a, Mode::Train, &mut rng),
                        None => Ok(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let g = step_with_cache(
                &model,
                &encoder,
                cache.as_ref(),
                &episodes,
                config.accumulation_steps,
                trainable,
                config.label_smoothing,
                batch_seed,
            )?;
            if !g.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch_seed,
                    detail: format!("training loss {} at step {step}", g.loss),
                });
            }
            model_opt.step(&mut model.params, &g.model, lr_body);
            if let Some(eg) = &g.encoder {
                enc_opt.step(&mut encoder.params, eg, lr_encoder);
            }
            loss_sum += g.loss;
        }

        let validate_now = epoch % config.val_every == 0 || epoch == config.epochs;
        let val_acc = match val {
            Some(v) if validate_now => {
                let predictor = IclPredictor { model: &model, encoder: &encoder };
                let report = evaluate(&predictor, v, config.n, config.k, config.val_episodes, config.n_max, val_seed)?;
                Some(report.mean_acc)
            }
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch,
            lr_body,
            lr_encoder,
            encoder_trainable: trainable,
            train_loss: loss_sum / steps as f64,
            val_acc,
            wall_seconds: config.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        if let Some(plan) = checkpoints {
            let meta = |epoch, acc| CheckpointMeta {
                regime: regime_code.clone(),
                train_config_hash: Some(config.hash()),
                epoch,
                val_acc: acc,
                ..CheckpointMeta::icl(&model.config, &encoder.config)
            };
            if let Some(acc) = val_acc {
                if best.map_or(true, |(_, b)| acc > b) {
                    save_checkpoint(&plan.dir.join("best.ckpt"), &model, &encoder, meta(epoch, Some(acc)))?;
                }
            }
            if epoch == config.epochs {
                save_checkpoint(&plan.dir.join("last.ckpt"), &model, &encoder, meta(epoch, val_acc))?;
            }
        }
        if let Some(acc) = val_acc {
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((epoch, acc));
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.4} lr {:.2e}/{:.2e} val {}",
            metrics.train_loss,
            lr_body,
            lr_encoder,
            val_acc.map_or("-".to_string(), |a| format!("{:.3}", a))
        );
        on_epoch(EpochView { metrics: &metrics, model: &model, encoder: &encoder });
        history.push(metrics);
    }
    Ok(TrainOutcome { model, encoder, history, best })
}
