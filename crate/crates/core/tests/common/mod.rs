//! Checks shared by the integration tests and the acceptance runner. Each
//! returns `Ok(summary)` or `Err(reason)`.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use rand::Rng;
use shotlab::datasets::{generate_shapes, Image, LabeledImageSet, ShapesSpec};
use shotlab::encoders::{build_encoder, images_to_tensor, Encoder, EncoderConfig, ResidualConfig, VitConfig};
use shotlab::episodes::{batch_episodes, sample_episode, Episode};
use shotlab::evaluation::{format_percent, knn_predict, mean_and_se};
use shotlab::icl::{icl_forward, IclModel, IclModelConfig};
use shotlab::pretraining::{combined_loss, mine_triplets, triplet_loss, Mining};
use shotlab::seed::{rng_from, Rng as SeedRng};
use shotlab::training::{
    regime_lrs, scheduled_lr, train_icl, RegimeConfig, ScheduleParams, TrainConfig,
};
use shotlab_tensor::{ParamStore, Scalar, Tape, Tensor};

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn tiny_residual(input: usize, embed_dim: usize) -> EncoderConfig {
    EncoderConfig::residual(
        input,
        embed_dim,
        ResidualConfig {
            stem_width: 4,
            stem_kernel: 3,
            stem_stride: 2,
            widths: vec![4, 8],
            strides: vec![1, 2],
            blocks_per_stage: 1,
            norm_groups: 2,
        },
    )
}

pub fn tiny_vit(input: usize, embed_dim: usize) -> EncoderConfig {
    EncoderConfig::vit(
        input,
        embed_dim,
        VitConfig {
            patch_size: 4,
            depth: 1,
            heads: 2,
            token_dim: 8,
            mlp_dim: 16,
        },
    )
}

pub fn tiny_model(embed_dim: usize, n_max: usize, layers: usize) -> IclModelConfig {
    IclModelConfig {
        n_max,
        embed_dim,
        heads: 2,
        layers,
        feedforward_dim: 16,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn tiny_set(classes: usize, per_class: usize, size: usize) -> LabeledImageSet {
    generate_shapes(&ShapesSpec::new(classes, per_class, size), 5).expect("valid shapes spec")
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error per parameter tensor, comparing `analytic` against
/// central differences of `loss`. Tensors larger than `per_tensor` entries
/// are checked at that many random positions.
pub fn gradcheck_store(
    store: &ParamStore<f64>,
    analytic: &[Option<Tensor<f64>>],
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
    per_tensor: usize,
    rng: &mut SeedRng,
) -> Vec<(String, f64)> {
    store
        .ids()
        .map(|id| {
            let numel = store.get(id).numel();
            let mut idx: Vec<usize> = (0..numel).collect();
            if numel > per_tensor {
                idx.shuffle(rng);
                idx.truncate(per_tensor);
            }
            let worst = idx
                .into_iter()
                .map(|i| {
                    let mut s = store.clone();
                    let x = s.get(id).data()[i];
                    s.get_mut(id).data_mut()[i] = x + FD_STEP;
                    let up = loss(&s);
                    s.get_mut(id).data_mut()[i] = x - FD_STEP;
                    let down = loss(&s);
                    let numeric = (up - down) / (2.0 * FD_STEP);
                    let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
                    relative_error(a, numeric)
                })
                .fold(0.0, f64::max);
            (store.name(id).to_string(), worst)
        })
        .collect()
}

fn summarize(label: &str, results: &[(String, f64)]) -> Check {
    let (name, worst) = results
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, r| if r.1 >= acc.1 { r } else { acc });
    let bad: Vec<_> = results.iter().filter(|r| !(r.1 <= GRAD_TOLERANCE)).collect();
    ensure(bad.is_empty(), || format!("{label}: groups over tolerance: {bad:?}"))?;
    Ok(format!("{label}: {} groups, worst {worst:.2e} ({name})", results.len()))
}

fn image_refs(set: &LabeledImageSet, n: usize) -> Vec<&Image> {
    set.items().iter().take(n).map(|i| &*i.image).collect()
}

/// Encoder followed by smoothed cross-entropy on its outputs.
pub fn check_encoder_gradients(config: &EncoderConfig, label: &str) -> Check {
    let set = tiny_set(4, 2, config.input_size.0);
    let images = image_refs(&set, 6);
    let targets: Vec<usize> = (0..images.len()).map(|i| i % config.embed_dim).collect();
    let x = images_to_tensor::<f64>(images.iter().copied(), config.input_size).map_err(fail)?;
    let encoder = build_encoder::<f64>(config, 3).map_err(fail)?;
    let loss_of = |e: &Encoder<f64>, grad: bool| {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let p = tape.bind(&e.params, grad);
        let xv = tape.constant(x.clone());
        let emb = e.forward(&mut tape, &p, xv);
        let loss = tape.cross_entropy(emb, &targets, 0.1);
        let value = tape.value(loss).data()[0];
        let grads = grad.then(|| {
            let mut g = tape.backward(loss);
            p.grads(&mut g)
        });
        (value, grads)
    };
    let analytic = loss_of(&encoder, true).1.expect("gradients requested");
    let loss = |s: &ParamStore<f64>| {
        let mut e = encoder.clone();
        e.params = s.clone();
        loss_of(&e, false).0
    };
    let results = gradcheck_store(&encoder.params, &analytic, &loss, 12, &mut rng_from(11));
    summarize(label, &results)
}

/// Encoder in the graph, token construction, masked transformer, head and
/// smoothed cross-entropy on the query logits.
pub fn check_icl_gradients() -> Check {
    let enc_cfg = tiny_residual(8, 4);
    let set = tiny_set(5, 4, 8);
    let mut rng = rng_from(21);
    let episodes = (0..2)
        .map(|_| sample_episode(&set, 2, 2, 4, &mut rng))
        .collect::<shotlab::Result<Vec<_>>>()
        .map_err(fail)?;
    let batch = batch_episodes(episodes).map_err(fail)?;
    let targets = batch.query_slots();
    let encoder = build_encoder::<f64>(&enc_cfg, 4).map_err(fail)?;
    let model = IclModel::<f64>::new(&tiny_model(4, 4, 2), 8).map_err(fail)?;
    type Grads = Vec<Option<Tensor<f64>>>;
    let loss_of = |m: &IclModel<f64>, e: &Encoder<f64>, grad: bool| -> (f64, Option<(Grads, Grads)>) {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let pm = tape.bind(&m.params, grad);
        let pe = tape.bind(&e.params, grad);
        let out = m
            .forward_batch::<SeedRng>(&mut tape, &pm, e, Some(&pe), &batch, None)
            .expect("consistent batch");
        let loss = tape.cross_entropy(out.logits, &targets, 0.1);
        let value = tape.value(loss).data()[0];
        let grads = grad.then(|| {
            let mut g = tape.backward(loss);
            (pm.grads(&mut g), pe.grads(&mut g))
        });
        (value, grads)
    };
    let (gm, ge) = loss_of(&model, &encoder, true).1.expect("gradients requested");
    let model_loss = |s: &ParamStore<f64>| {
        let mut m = model.clone();
        m.params = s.clone();
        loss_of(&m, &encoder, false).0
    };
    let encoder_loss = |s: &ParamStore<f64>| {
        let mut e = encoder.clone();
        e.params = s.clone();
        loss_of(&model, &e, false).0
    };
    let mut rng = rng_from(12);
    let mut results = gradcheck_store(&model.params, &gm, &model_loss, 12, &mut rng);
    results.extend(
        gradcheck_store(&encoder.params, &ge, &encoder_loss, 12, &mut rng)
            .into_iter()
            .map(|(n, e)| (format!("encoder/{n}"), e)),
    );
    summarize("icl + smoothed CE", &results)
}

/// Smoothed cross-entropy plus the weighted triplet term on normalised
/// embeddings, differentiated with respect to the embeddings.
pub fn check_combined_loss_gradients() -> Check {
    let mut rng = rng_from(31);
    let (b, d) = (8, 5);
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let emb = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let triplets = mine_triplets(&emb, &labels, Mining::All, 0.2);
    let loss_of = |e: &Tensor<f64>, grad: bool| {
        let mut tape = Tape::new();
        let x = tape.leaf(e.clone(), grad);
        let ce = tape.cross_entropy(x, &labels, 0.1);
        let normed = tape.l2_normalize_rows(x);
        let tri = tape.triplet(normed, &triplets, 0.2);
        let tri = tape.scale(tri, 0.5);
        let loss = tape.add(ce, tri);
        let value = tape.value(loss).data()[0];
        (value, grad.then(|| tape.backward(loss).take(x)).flatten())
    };
    let analytic = loss_of(&emb, true).1.ok_or("no embedding gradient")?;
    let mut worst: f64 = 0.0;
    for i in 0..b * d {
        let mut e = emb.clone();
        e.data_mut()[i] += FD_STEP;
        let up = loss_of(&e, false).0;
        e.data_mut()[i] -= 2.0 * FD_STEP;
        let down = loss_of(&e, false).0;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    ensure(worst <= GRAD_TOLERANCE, || format!("combined loss worst {worst:.2e}"))?;
    Ok(format!("combined loss: worst {worst:.2e}"))
}

// ------------------------------------------------------------ model algebra

/// Support hidden rows at every depth, and the query row of the input.
fn hidden_rows(model: &IclModel<f64>, encoder: &Encoder<f64>, episode: &Episode) -> Vec<Tensor<f64>> {
    let batch = batch_episodes(vec![episode.clone()]).expect("single episode");
    let mut tape = Tape::no_grad();
    let p = tape.bind(&model.params, false);
    let out = model
        .forward_batch::<SeedRng>(&mut tape, &p, encoder, None, &batch, None)
        .expect("consistent batch");
    out.hidden.iter().map(|&h| tape.value(h).clone()).collect()
}

pub fn check_mask_causality() -> Check {
    let set = tiny_set(4, 6, 8);
    let encoder = build_encoder::<f64>(&tiny_residual(8, 4), 1).map_err(fail)?;
    let model = IclModel::<f64>::new(&tiny_model(4, 4, 1), 2).map_err(fail)?;
    let mut rng = rng_from(41);
    let mut checked = 0;
    for _ in 0..10 {
        let a = sample_episode(&set, 2, 2, 4, &mut rng).map_err(fail)?;
        ensure(a.m() == 4, || format!("expected m = 4, got {}", a.m()))?;
        let mut b = a.clone();
        let pool: Vec<_> = set
            .items()
            .iter()
            .filter(|i| i.id != a.query.id && a.supports.iter().all(|s| s.id != i.id))
            .collect();
        b.query = (*pool.choose(&mut rng).expect("spare items")).clone();
        ensure(a.query.image.data != b.query.image.data, || "query images coincide".into())?;
        let (ha, hb) = (hidden_rows(&model, &encoder, &a), hidden_rows(&model, &encoder, &b));
        for (layer, (x, y)) in ha.iter().zip(&hb).enumerate() {
            for r in 0..4 {
                let same = x.row(r).iter().zip(y.row(r)).all(|(p, q)| p.to_bits() == q.to_bits());
                ensure(same, || format!("support row {r} differs at depth {layer}"))?;
            }
        }
        let last = ha.len() - 1;
        ensure(ha[last].row(4) != hb[last].row(4), || "query row ignores the query image".into())?;
        checked += 1;
    }
    Ok(format!("{checked} episode pairs, supports bit-identical at all depths"))
}

fn query_logits<T: Scalar>(model: &IclModel<T>, encoder: &Encoder<T>, e: &Episode) -> Vec<f64> {
    let batch = batch_episodes(vec![e.clone()]).expect("single episode");
    icl_forward(model, &batch, encoder).expect("finite logits").to_f64_vec()
}

pub fn check_permutation_invariance(episodes: usize) -> Check {
    let set = tiny_set(6, 10, 16);
    let encoder = build_encoder::<f64>(&tiny_residual(16, 8), 1).map_err(fail)?;
    let model = IclModel::<f64>::new(&tiny_model(8, 6, 2), 2).map_err(fail)?;
    let (enc32, model32) = (encoder.cast::<f32>(), model.cast::<f32>());
    let mut rng = rng_from(51);
    let (mut worst64, mut worst32): (f64, f64) = (0.0, 0.0);
    for _ in 0..episodes {
        let e = sample_episode(&set, 3, 3, 6, &mut rng).map_err(fail)?;
        let mut p = e.clone();
        while p.supports.iter().map(|s| &s.id).eq(e.supports.iter().map(|s| &s.id)) {
            p.supports.shuffle(&mut rng);
        }
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst64 = worst64.max(diff(&query_logits(&model, &encoder, &e), &query_logits(&model, &encoder, &p)));
        worst32 = worst32.max(diff(&query_logits(&model32, &enc32, &e), &query_logits(&model32, &enc32, &p)));
    }
    ensure(worst64 <= 1e-12, || format!("double precision drift {worst64:.2e}"))?;
    ensure(worst32 <= 1e-4, || format!("single precision drift {worst32:.2e}"))?;
    Ok(format!("{episodes} episodes, max drift {worst64:.1e} (f64) / {worst32:.1e} (f32)"))
}

// ------------------------------------------------------------------ training

pub fn tiny_train_config(epochs: usize, regime: RegimeConfig) -> TrainConfig {
    TrainConfig {
        epochs,
        samples_per_epoch: 4,
        batch_size: 2,
        n: 2,
        k: 2,
        n_max: 4,
        schedule: ScheduleParams::spanning(1e-3, 1e-5, 1, 1, epochs),
        regime,
        augment_episodes: false,
        ..Default::default()
    }
}

/// Encoder checksum after each epoch, preceded by the initial one.
pub fn encoder_checksums(regime: RegimeConfig, epochs: usize) -> Result<Vec<String>, String> {
    let set = tiny_set(4, 6, 8);
    let encoder = build_encoder::<f32>(&tiny_residual(8, 4), 1).map_err(fail)?;
    let model = IclModel::<f32>::new(&tiny_model(4, 4, 1), 2).map_err(fail)?;
    let mut sums = vec![encoder.params.checksum()];
    train_icl(model, encoder, &set, None, &tiny_train_config(epochs, regime), None, |v| {
        sums.push(v.encoder.params.checksum())
    })
    .map_err(fail)?;
    Ok(sums)
}

pub fn check_regime_contracts() -> Check {
    let frozen = encoder_checksums(RegimeConfig::frozen(), 5)?;
    ensure(frozen.iter().all(|s| s == &frozen[0]), || "frozen encoder changed".into())?;
    let delayed = encoder_checksums(RegimeConfig::delayed(3), 5)?;
    ensure(delayed[1..=3].iter().all(|s| s == &delayed[0]), || "delayed encoder changed by epoch 3".into())?;
    ensure(delayed[4] != delayed[3], || "delayed encoder unchanged at epoch 4".into())?;
    let joint = encoder_checksums(RegimeConfig::joint(), 1)?;
    ensure(joint[1] != joint[0], || "joint encoder unchanged at epoch 1".into())?;
    let schedule = ScheduleParams::spanning(1e-4, 1e-5, 50, 10, 600);
    let always_frozen = (1..=600).all(|e| regime_lrs(&RegimeConfig::frozen(), &schedule, e).1 == 0.0);
    ensure(always_frozen, || "frozen regime assigns an encoder rate".into())?;
    Ok("frozen unchanged over 5 epochs; delayed(3) first changes at epoch 4; joint changes at epoch 1".into())
}

/// Independent closed form of the three-phase schedule.
pub fn schedule_oracle(epoch: f64, lr_max: f64, lr_min: f64, warmup: f64, plateau: f64, decay: f64) -> f64 {
    if epoch <= warmup {
        lr_max * epoch / warmup
    } else if epoch <= warmup + plateau {
        lr_max
    } else {
        let t = (epoch - warmup - plateau) / decay;
        (lr_max.ln() + t * (lr_min.ln() - lr_max.ln())).exp()
    }
}

pub fn check_schedule_table() -> Check {
    let p = ScheduleParams {
        lr_max: 1e-4,
        lr_min: 1e-5,
        warmup_epochs: 50,
        plateau_epochs: 10,
        decay_epochs: 540,
    };
    let mut rows = Vec::new();
    for epoch in [1usize, 25, 50, 55, 60, 330, 600] {
        let got = scheduled_lr(epoch, &p);
        let want = schedule_oracle(epoch as f64, 1e-4, 1e-5, 50.0, 10.0, 540.0);
        let rel = (got - want).abs() / want;
        ensure(rel <= 1e-12, || format!("epoch {epoch}: {got:e} vs {want:e}"))?;
        rows.push(format!("{epoch}:{got:.3e}"));
    }
    ensure(scheduled_lr(600, &p) == 1e-5, || "endpoint is not exactly lr_min".into())?;
    Ok(rows.join(" "))
}

// ------------------------------------------------------------------ triplets

pub fn check_triplet_suite() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let l1 = triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 0.2).map_err(fail)?;
    let l2 = triplet_loss(&[0.0, 0.0], &[0.0, 1.0], &[3.0, 0.0], 0.5).map_err(fail)?;
    let l3 = triplet_loss(&[0.0, 0.0], &[0.0, 2.0], &[1.0, 0.0], 0.25).map_err(fail)?;
    ensure(close(l1, 0.0) && close(l2, 0.0) && close(l3, 3.25), || format!("examples gave {l1}, {l2}, {l3}"))?;
    ensure(close(combined_loss(1.0, 3.25, 0.4), 2.3), || "combined loss example".into())?;

    let mut rng = rng_from(61);
    for _ in 0..500 {
        let d = rng.gen_range(1..6);
        let mut v = || (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, p, n) = (v(), v(), v());
        let margin = rng.gen_range(0.0..1.0);
        let loss = triplet_loss(&a, &p, &n, margin).map_err(fail)?;
        ensure(loss >= 0.0, || format!("negative triplet loss {loss}"))?;
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(s, t)| (s - t) * (s - t)).sum::<f64>();
        if sq(&a, &n) >= sq(&a, &p) + margin {
            ensure(loss == 0.0, || format!("margin satisfied but loss {loss}"))?;
        }
    }

    for batch in 0..50 {
        let b = rng.gen_range(3..16);
        let classes = rng.gen_range(1..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let emb = Tensor::new(vec![b, 3], (0..b * 3).map(|_| rng.gen_range(-1.0f64..1.0)).collect());
        let got = mine_triplets(&emb, &labels, Mining::All, 0.2).len();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
        let want: usize = counts.values().map(|&c| c * (c - 1) * (b - c)).sum();
        ensure(got == want, || format!("batch {batch}: {got} triplets, expected {want}"))?;
    }
    Ok("3 examples, 500 property cases, 50 mining batches".into())
}

// ----------------------------------------------------------------------- KNN

/// Exhaustive reference: stable sort by true Euclidean distance, tally every
/// slot among the first `k`, then break majority ties by best rank.
pub fn knn_oracle(sup: &[Vec<f64>], slots: &[usize], query: &[f64], k: usize) -> usize {
    let dist = |v: &Vec<f64>| v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut idx: Vec<usize> = (0..sup.len()).collect();
    idx.sort_by(|&a, &b| dist(&sup[a]).partial_cmp(&dist(&sup[b])).expect("finite"));
    let mut tally: HashMap<usize, (usize, usize)> = HashMap::new();
    for (rank, &i) in idx[..k].iter().enumerate() {
        let e = tally.entry(slots[i]).or_insert((0, rank));
        e.0 += 1;
    }
    let mut best: Vec<(usize, (usize, usize))> = tally.into_iter().collect();
    best.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    best[0].0
}

fn knn_case(sup: &[Vec<f64>], slots: &[usize], query: &[f64], k: usize) -> Result<(usize, usize), String> {
    let d = query.len();
    let t = Tensor::new(vec![sup.len(), d], sup.concat());
    let got = knn_predict(&t, slots, query, k).map_err(fail)?;
    Ok((got, knn_oracle(sup, slots, query, k)))
}

pub fn check_knn_oracle() -> Check {
    let mut rng = rng_from(71);
    let mut cases = 0;
    // Random instances; integer coordinates make exact distance ties common.
    for i in 0..200 {
        let m = rng.gen_range(5..=20);
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=m.min(7));
        let slots: Vec<usize> = (0..m).map(|_| rng.gen_range(0..4)).collect();
        let integer = i % 2 == 0;
        let mut coord = || if integer { rng.gen_range(-2i32..=2) as f64 } else { rng.gen_range(-1.0..1.0) };
        let sup: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| coord()).collect()).collect();
        let query: Vec<f64> = (0..d).map(|_| coord()).collect();
        let (got, want) = knn_case(&sup, &slots, &query, k)?;
        ensure(got == want, || format!("instance {i}: predicted {got}, oracle {want}"))?;
        cases += 1;
    }
    // Majority tie: two slots with two neighbours each, nearest decides.
    let sup = vec![vec![1.0], vec![1.5], vec![2.0], vec![2.5], vec![9.0]];
    for (slots, want) in [(vec![4, 7, 7, 4, 2], 4), (vec![7, 4, 4, 7, 2], 7)] {
        let (got, oracle) = knn_case(&sup, &slots, &[0.9], 5)?;
        ensure(got == want && oracle == want, || format!("majority tie: {got}/{oracle}, expected {want}"))?;
        cases += 1;
    }
    // Distance tie: both nearest supports are equidistant; the lower index wins.
    let sup = vec![vec![1.0], vec![-1.0], vec![3.0]];
    let (got, oracle) = knn_case(&sup, &[8, 3, 3], &[0.0], 1)?;
    ensure(got == 8 && oracle == 8, || format!("distance tie: {got}/{oracle}"))?;
    let (got, oracle) = knn_case(&[vec![0.1], vec![0.2], vec![0.3], vec![5.0], vec![6.0]], &[0, 0, 0, 1, 1], &[0.0], 5)?;
    ensure(got == 0 && oracle == 0, || "3-of-5 majority".into())?;
    Ok(format!("{} instances agree with the brute-force oracle", cases + 2))
}

// ------------------------------------------------------------------------ SE

pub fn check_se_anchor() -> Check {
    let outcomes = |ones: usize, n: usize| (0..n).map(|i| i < ones).collect::<Vec<bool>>();
    let (m1, s1) = mean_and_se(&outcomes(1040, 5000)).map_err(fail)?;
    let (m2, s2) = mean_and_se(&outcomes(2500, 5000)).map_err(fail)?;
    let (f1, f2) = (format_percent(m1, s1), format_percent(m2, s2));
    ensure(f1 == "20.8 ± 0.6", || format!("0.208 formatted as {f1}"))?;
    ensure(f2 == "50.0 ± 0.7", || format!("0.5 formatted as {f2}"))?;
    ensure((s1 - (0.208f64 * 0.792 / 5000.0).sqrt()).abs() < 1e-15, || "binomial SE".into())?;
    Ok(format!("\"{f1}\", \"{f2}\""))
}

// ----------------------------------------------------------------------- CLI

pub fn shotlab(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_shotlab"))
        .args(args)
        .env_remove("SHOTLAB_OUT")
        .output()
        .map_err(fail)
}

pub fn shotlab_ok(args: &[&str]) -> Result<String, String> {
    let out = shotlab(args)?;
    ensure(out.status.success(), || {
        format!("`shotlab {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub const TINY_CONFIG: &str = r#"seed = 3
[data]
image_size = 16
holdout_classes = 3
[encoder]
embed_dim = 8
[encoder.residual]
stem_width = 4
widths = [4, 8]
strides = [1, 2]
blocks_per_stage = 1
norm_groups = 2
[pretrain]
epochs = 2
classes_per_batch = 3
samples_per_class = 2
[model]
embed_dim = 8
heads = 2
layers = 1
feedforward_dim = 16
[train]
epochs = 3
samples_per_epoch = 8
batch_size = 4
n = 3
k = 2
val_every = 2
val_episodes = 10
[eval]
n = 3
k = 2
tasks = 40
k_values = [1, 2]
"#;

/// Writes the tiny corpus, config and a pretrained encoder under `root`.
pub fn tiny_cli_fixture(root: &Path) -> Result<(), String> {
    let r = |p: &str| root.join(p).display().to_string();
    std::fs::write(root.join("tiny.toml"), TINY_CONFIG).map_err(fail)?;
    shotlab_ok(&["gen-shapes", "--out", &r("data"), "--classes", "8", "--per-class", "6", "--size", "16", "--seed", "1"])?;
    shotlab_ok(&["--config", &r("tiny.toml"), "pretrain", "--data", &r("data"), "--out", &r("pre")])?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs train and eval twice with the same config and seed and compares
/// the metrics and report bytes.
pub fn check_reproducibility(root: &Path) -> Check {
    tiny_cli_fixture(root)?;
    let r = |p: &str| root.join(p).display().to_string();
    for run in ["a", "b"] {
        let out = r(&format!("train-{run}"));
        shotlab_ok(&[
            "--config", &r("tiny.toml"), "train", "--data", &r("data"), "--out", &out,
            "--encoder-ckpt", &r("pre/encoder.ckpt"), "--regime", "joint",
        ])?;
        shotlab_ok(&[
            "--config", &r("tiny.toml"), "eval", "--data", &r("data"), "--model", &format!("{out}/last.ckpt"),
            "--classes", "holdout", "--out", &r(&format!("report-{run}.json")),
        ])?;
    }
    let (ma, mb) = (read(&root.join("train-a/metrics.jsonl"))?, read(&root.join("train-b/metrics.jsonl"))?);
    ensure(!ma.is_empty() && ma == mb, || "metrics JSONL differs between identical runs".into())?;
    let (ra, rb) = (read(&root.join("report-a.json"))?, read(&root.join("report-b.json"))?);
    ensure(ra == rb, || "report JSON differs between identical runs".into())?;
    let (ca, cb) = (read(&root.join("train-a/last.ckpt"))?, read(&root.join("train-b/last.ckpt"))?);
    ensure(ca == cb, || "checkpoints differ between identical runs".into())?;
    Ok(format!("metrics ({} bytes), report ({} bytes) and checkpoint byte-identical", ma.len(), ra.len()))
}
