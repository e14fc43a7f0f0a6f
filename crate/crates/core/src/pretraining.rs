//! Supervised encoder pretraining with label-smoothed cross-entropy and an
//! optional in-batch triplet term.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use shotlab_tensor::{AdamW, AdamWConfig, ParamStore, Scalar, Tape, Tensor};

use crate::datasets::{preprocess, AugmentParams, Image, LabeledImageSet, Mode};
use crate::encoders::{images_to_tensor, Encoder};
use crate::error::{validation, Error, Result};
use crate::nn::Linear;
use crate::seed::{derive_rng, derive_seed, rng_from};

/// `-sum_c q_c log softmax(logits)_c` with `q` the one-hot target mixed with
/// the uniform distribution by `eps`.
pub fn cross_entropy_smoothed(logits: &[f64], target: usize, eps: f64) -> Result<f64> {
    let c = logits.len();
    if c < 2 || target >= c {
        return Err(validation(format!("target {target} invalid for {c} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(validation("label smoothing must be in [0, 1)"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let off = eps / c as f64;
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let q = if i == target { 1.0 - eps + off } else { off };
            q * (lse - v)
        })
        .sum())
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(validation("triplet vectors differ in dimension"));
    }
    if margin < 0.0 {
        return Err(validation("triplet margin must be non-negative"));
    }
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    Ok((sq(a, p) - sq(a, n) + margin).max(0.0))
}

pub fn combined_loss(class_loss: f64, triplet_loss: f64, weight: f64) -> f64 {
    class_loss + weight * triplet_loss
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    All,
    SemiHard,
    HardestNegative,
}

/// Valid `(anchor, positive, negative)` index triplets for a batch.
///
/// `SemiHard` keeps, per anchor-positive pair, the closest negative lying
/// strictly inside `(d_ap, d_ap + margin)` and falls back to the closest
/// negative overall. Distance ties go to the lower index.
pub fn mine_triplets<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    strategy: Mining,
    margin: f64,
) -> Vec<(usize, usize, usize)> {
    let b = labels.len();
    assert_eq!(embeddings.rows(), b, "one label per embedding row");
    if b < 3 {
        return Vec::new();
    }
    let dist = |i: usize, j: usize| -> f64 {
        embeddings
            .row(i)
            .iter()
            .zip(embeddings.row(j))
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum()
    };
    let mut out = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let negs = (0..b).filter(|&n| labels[n] != labels[a]);
            match strategy {
                Mining::All => out.extend(negs.map(|n| (a, p, n))),
                Mining::HardestNegative | Mining::SemiHard => {
                    let d_ap = dist(a, p);
                    let mut hardest: Option<(f64, usize)> = None;
                    let mut semi: Option<(f64, usize)> = None;
                    for n in negs {
                        let d = dist(a, n);
                        if hardest.map_or(true, |(h, _)| d < h) {
                            hardest = Some((d, n));
                        }
                        if d > d_ap && d < d_ap + margin && semi.map_or(true, |(s, _)| d < s) {
                            semi = Some((d, n));
                        }
                    }
                    let pick = if strategy == Mining::SemiHard { semi.or(hardest) } else { hardest };
                    if let Some((_, n)) = pick {
                        out.push((a, p, n));
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletParams {
    pub margin: f64,
    pub weight: f64,
    pub mining: Mining,
    pub normalize_embeddings: bool,
}

impl Default for TripletParams {
    fn default() -> Self {
        TripletParams {
            margin: 0.2,
            weight: 0.5,
            mining: Mining::SemiHard,
            normalize_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Classes per batch (P).
    pub classes_per_batch: usize,
    /// Images per class per batch (K).
    pub samples_per_class: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub label_smoothing: f64,
    pub triplet: Option<TripletParams>,
    /// Fraction of each class's items held out for validation accuracy.
    pub val_fraction: f64,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            classes_per_batch: 8,
            samples_per_class: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            label_smoothing: 0.1,
            triplet: None,
            val_fraction: 0.1,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return Err(validation("epochs and batch composition must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(validation("label smoothing must be in [0, 1)"));
        }
        if let Some(t) = &self.triplet {
            if t.margin < 0.0 || t.weight < 0.0 {
                return Err(validation("triplet margin and weight must be non-negative"));
            }
            if self.classes_per_batch < 2 || self.samples_per_class < 2 {
                return Err(validation("triplet mining needs at least 2 classes x 2 samples per batch"));
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub loss_class: f64,
    pub loss_triplet: f64,
    pub loss_total: f64,
    pub val_top1: f64,
    pub lr: f64,
}

/// Trains `encoder` through a temporary linear classifier over the
/// dataset's classes and returns it with the classifier discarded.
pub fn pretrain_encoder<T: Scalar>(
    dataset: &LabeledImageSet,
    mut encoder: Encoder<T>,
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainMetrics),
) -> Result<(Encoder<T>, Vec<PretrainMetrics>)> {
    config.validate()?;
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(validation("pretraining needs at least two classes"));
    }
    if config.classes_per_batch > classes {
        return Err(validation(format!(
            "batches of {} classes requested, dataset has {classes}",
            config.classes_per_batch
        )));
    }
    let (train, val) = if config.val_fraction > 0.0 {
        let (t, v) = dataset.split_items(config.val_fraction)?;
        (t, Some(v))
    } else {
        (dataset.clone(), None)
    };
    let (p_cls, k_cls) = (config.classes_per_batch, config.samples_per_class);
    if let Some(c) = (0..classes).find(|&c| train.class_items(c).len() < k_cls) {
        return Err(Error::Capacity(format!(
            "class {} has fewer than {k_cls} training images",
            train.class_names()[c]
        )));
    }
    let batch_size = p_cls * k_cls;
    let steps = (train.len() / batch_size).max(1);

    let mut head_store = ParamStore::<T>::new();
    let head = Linear::new(
        &mut head_store,
        "pretrain_head",
        encoder.embed_dim(),
        classes,
        &mut derive_rng(config.seed, "pretrain-head", &[]),
    );
    let opt_cfg = AdamWConfig {
        beta1: config.betas.0,
        beta2: config.betas.1,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut enc_opt = AdamW::new(opt_cfg, &encoder.params);
    let mut head_opt = AdamW::new(opt_cfg, &head_store);
    let trip = config.triplet.clone();
    let augment = AugmentParams {
        target_size: encoder.input_size(),
        ..config.augment.clone()
    };
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let (mut sum_class, mut sum_trip, mut sum_total) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let batch_seed = derive_seed(config.seed, "pretrain-batch", &[epoch as u64, step as u64]);
            let mut rng = rng_from(batch_seed);
            let mut images = Vec::with_capacity(batch_size);
            let mut labels = Vec::with_capacity(batch_size);
            for c in sample(&mut rng, classes, p_cls).into_vec() {
                let pool = train.class_items(c);
                for j in sample(&mut rng, pool.len(), k_cls).into_vec() {
                    let img = &train.items()[pool[j]].image;
                    images.push(preprocess(img, &augment, Mode::Train, &mut rng)?);
                    labels.push(c);
                }
            }

            let mut tape = Tape::new();
            let pe = tape.bind(&encoder.params, true);
            let ph = tape.bind(&head_store, true);
            let x = tape.constant(images_to_tensor::<T>(images.iter(), encoder.input_size())?);
            let emb = encoder.forward(&mut tape, &pe, x);
            let logits = head.forward(&mut tape, &ph, emb);
            let ce = tape.cross_entropy(logits, &labels, config.label_smoothing);
            let mut loss = ce;
            let mut trip_value = 0.0;
            if let Some(t) = &trip {
                let e = if t.normalize_embeddings { tape.l2_normalize_rows(emb) } else { emb };
                let triplets = mine_triplets(tape.value(e), &labels, t.mining, t.margin);
                let tl = tape.triplet(e, &triplets, t.margin);
                trip_value = tape.value(tl).data()[0].as_f64();
                if t.weight > 0.0 {
                    let scaled = tape.scale(tl, T::from_f64(t.weight));
                    loss = tape.add(ce, scaled);
                }
            }
            let class_value = tape.value(ce).data()[0].as_f64();
            let total = tape.value(loss).data()[0].as_f64();
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch_seed,
                    detail: format!("pretraining loss {total} at step {step}"),
                });
            }
            let mut grads = tape.backward(loss);
            let ge = pe.grads(&mut grads);
            let gh = ph.grads(&mut grads);
            enc_opt.step(&mut encoder.params, &ge, config.learning_rate);
            head_opt.step(&mut head_store, &gh, config.learning_rate);
            sum_class += class_value;
            sum_trip += trip_value;
            sum_total += total;
        }
        let val_top1 = match &val {
            Some(v) => classifier_accuracy(&encoder, &head_store, &head, v)?,
            None => f64::NAN,
        };
        let m = PretrainMetrics {
            epoch,
            loss_class: sum_class / steps as f64,
            loss_triplet: sum_trip / steps as f64,
            loss_total: sum_total / steps as f64,
            val_top1,
            lr: config.learning_rate,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok((encoder, history))
}

fn classifier_accuracy<T: Scalar>(
    encoder: &Encoder<T>,
    head_store: &ParamStore<T>,
    head: &Linear,
    set: &LabeledImageSet,
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in set.items().chunks(128) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &*i.image).collect();
        let emb = encoder.encode(&imgs)?;
        let mut tape = Tape::no_grad();
        let ph = tape.bind(head_store, false);
        let e = tape.constant(emb);
        let logits = head.forward(&mut tape, &ph, e);
        let lv = tape.value(logits);
        for (r, item) in chunk.iter().enumerate() {
            let row = lv.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            correct += (best == item.class_id) as usize;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
