//! Saves a model and encoder, reads back the JSON sidecar and verifies that
//! the reloaded pair reproduces the original logits exactly.
//!
//! cargo run --example checkpoints -- [out_dir]

use std::path::PathBuf;

use shotlab::datasets::{generate_shapes, ShapesSpec};
use shotlab::encoders::{build_encoder, EncoderConfig, ResidualConfig};
use shotlab::episodes::{batch_episodes, sample_episode};
use shotlab::icl::{icl_forward, IclModel, IclModelConfig};
use shotlab::seed::rng_from;
use shotlab::training::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta};

fn main() -> shotlab::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("shotlab-ckpt"));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");

    let encoder = build_encoder::<f32>(&EncoderConfig::residual(32, 64, ResidualConfig::compact()), 4)?;
    let model = IclModel::<f32>::new(&IclModelConfig::default(), 4)?;
    save_checkpoint(&path, &model, &encoder, CheckpointMeta::icl(&model.config, &encoder.config))?;
    println!("{}", std::fs::read_to_string(sidecar_path(&path))?);

    let (model2, encoder2, meta) = load_checkpoint::<f32>(&path)?;
    println!("loaded {} checkpoint, content sha256 {}", meta.kind, meta.content_sha256);

    let set = generate_shapes(&ShapesSpec::new(6, 10, 32), 0)?;
    let mut rng = rng_from(0);
    let episodes = (0..4).map(|_| sample_episode(&set, 5, 1, 10, &mut rng)).collect::<shotlab::Result<Vec<_>>>()?;
    let batch = batch_episodes(episodes)?;
    let a = icl_forward(&model, &batch, &encoder)?;
    let b = icl_forward(&model2, &batch, &encoder2)?;
    assert_eq!(a.data(), b.data());
    println!("reloaded logits are bit-identical over {} episodes", batch.batch_size());
    Ok(())
}
