//! Trains the in-context classifier on top of a frozen pretrained encoder,
//! writing `best.ckpt` and `last.ckpt`, and evaluates it on held-out classes.
//!
//! cargo run --release --example train_icl -- [out_dir]

use std::path::PathBuf;

use shotlab::datasets::{generate_shapes, split_classes, ShapesSpec};
use shotlab::encoders::{build_encoder, EncoderConfig, ResidualConfig};
use shotlab::evaluation::{evaluate, IclPredictor, KnnPredictor};
use shotlab::icl::{IclModel, IclModelConfig};
use shotlab::pretraining::{pretrain_encoder, PretrainConfig};
use shotlab::training::{train_icl, CheckpointPlan, RegimeConfig, ScheduleParams, TrainConfig};

fn main() -> shotlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("shotlab-train"));
    std::fs::create_dir_all(&out)?;

    let set = generate_shapes(&ShapesSpec::new(16, 60, 32), 1)?;
    let (train, holdout) = split_classes(&set, 5, 0)?;

    let encoder = build_encoder::<f32>(&EncoderConfig::residual(32, 64, ResidualConfig::compact()), 0)?;
    let (encoder, _) = pretrain_encoder(&train, encoder, &PretrainConfig { epochs: 10, ..Default::default() }, |_| {})?;

    let epochs = 10;
    let config = TrainConfig {
        epochs,
        samples_per_epoch: 400,
        schedule: ScheduleParams::spanning(1e-3, 1e-5, 2, 1, epochs),
        regime: RegimeConfig::frozen(),
        augment_episodes: false,
        val_every: 2,
        val_episodes: 200,
        ..Default::default()
    };
    let model = IclModel::<f32>::new(&IclModelConfig::default(), 0)?;
    let plan = CheckpointPlan { dir: &out, regime_code: "res-pre[s,-,-]".into() };
    let result = train_icl(model, encoder, &train, Some(&holdout), &config, Some(&plan), |v| {
        if let Some(acc) = v.metrics.val_acc {
            println!("epoch {:>2}  loss {:.3}  val {:.1}%", v.metrics.epoch, v.metrics.train_loss, 100.0 * acc);
        }
    })?;

    let icl = IclPredictor { model: &result.model, encoder: &result.encoder };
    let knn = KnnPredictor { encoder: &result.encoder, k_neighbors: 5 };
    println!("icl 5-way 5-shot: {}", evaluate(&icl, &holdout, 5, 5, 1000, 10, 5)?.formatted());
    println!("knn 5-way 5-shot: {}", evaluate(&knn, &holdout, 5, 5, 1000, 10, 5)?.formatted());
    println!("checkpoints in {}", out.display());
    Ok(())
}
