//! Pretrains an image encoder with smoothed cross-entropy plus semi-hard
//! triplet loss, then measures how well nearest-neighbour voting on its
//! embeddings separates unseen classes.
//!
//! cargo run --example pretrain_encoder -- [res|vit]

use shotlab::datasets::{generate_shapes, split_classes, LabeledImageSet, ShapesSpec};
use shotlab::encoders::{build_encoder, Encoder, EncoderConfig, ResidualConfig, VitConfig};
use shotlab::evaluation::{evaluate, KnnPredictor};
use shotlab::pretraining::{pretrain_encoder, PretrainConfig, TripletParams};

fn knn(encoder: &Encoder<f32>, holdout: &LabeledImageSet) -> shotlab::Result<String> {
    let p = KnnPredictor { encoder, k_neighbors: 5 };
    Ok(evaluate(&p, holdout, 5, 5, 300, 10, 11)?.formatted())
}

fn main() -> shotlab::Result<()> {
    let set = generate_shapes(&ShapesSpec::new(16, 40, 32), 3)?;
    let (train, holdout) = split_classes(&set, 5, 0)?;

    let config = match std::env::args().nth(1).as_deref() {
        Some("vit") => EncoderConfig::vit(32, 32, VitConfig { depth: 2, token_dim: 64, mlp_dim: 128, ..VitConfig::default() }),
        _ => EncoderConfig::residual(32, 32, ResidualConfig::compact()),
    };
    let encoder = build_encoder::<f32>(&config, 0)?;

    println!("random init, 5-way 5-shot KNN: {}", knn(&encoder, &holdout)?);

    let cfg = PretrainConfig {
        epochs: 8,
        triplet: Some(TripletParams::default()),
        ..Default::default()
    };
    let (encoder, _) = pretrain_encoder(&train, encoder, &cfg, |m| {
        println!(
            "epoch {:>2}  ce {:.3}  triplet {:.3}  item top-1 {:.3}",
            m.epoch, m.loss_class, m.loss_triplet, m.val_top1
        );
    })?;
    println!("pretrained, 5-way 5-shot KNN: {}", knn(&encoder, &holdout)?);
    Ok(())
}
