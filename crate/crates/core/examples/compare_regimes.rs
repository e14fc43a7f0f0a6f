//! Trains the same model under the frozen, delayed and joint encoder
//! regimes and reports held-out accuracy for each.
//!
//! cargo run --release --example compare_regimes

use shotlab::datasets::{generate_shapes, split_classes, ShapesSpec};
use shotlab::encoders::{build_encoder, EncoderConfig, ResidualConfig};
use shotlab::evaluation::{evaluate, IclPredictor};
use shotlab::icl::{IclModel, IclModelConfig};
use shotlab::pretraining::{pretrain_encoder, PretrainConfig};
use shotlab::training::{format_regime, train_icl, EncoderFamily, RegimeConfig, ScheduleParams, TrainConfig};

fn main() -> shotlab::Result<()> {
    let set = generate_shapes(&ShapesSpec::new(16, 60, 32), 1)?;
    let (train, holdout) = split_classes(&set, 5, 0)?;
    let encoder = build_encoder::<f32>(&EncoderConfig::residual(32, 64, ResidualConfig::compact()), 0)?;
    let (pretrained, _) = pretrain_encoder(&train, encoder, &PretrainConfig { epochs: 10, ..Default::default() }, |_| {})?;

    let epochs = 10;
    for regime in [RegimeConfig::frozen(), RegimeConfig::delayed(4), RegimeConfig::joint()] {
        let config = TrainConfig {
            epochs,
            samples_per_epoch: 400,
            schedule: ScheduleParams::spanning(1e-3, 1e-5, 2, 1, epochs),
            regime: regime.clone(),
            augment_episodes: false,
            val_every: epochs,
            val_episodes: 100,
            ..Default::default()
        };
        let model = IclModel::<f32>::new(&IclModelConfig::default(), 0)?;
        let out = train_icl(model, pretrained.clone(), &train, Some(&holdout), &config, None, |_| {})?;
        let p = IclPredictor { model: &out.model, encoder: &out.encoder };
        let report = evaluate(&p, &holdout, 5, 5, 500, 10, 3)?;
        println!("{:<18} {}", format_regime(EncoderFamily::Res, regime.encoder_pretrained, &regime), report.formatted());
    }
    Ok(())
}
