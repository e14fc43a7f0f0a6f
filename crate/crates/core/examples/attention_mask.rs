//! Prints the asymmetric attention mask, then the query logits of one
//! episode under two different query images of the same class.
//!
//! cargo run --example attention_mask

use shotlab::datasets::{generate_shapes, ShapesSpec};
use shotlab::encoders::{build_encoder, EncoderConfig, ResidualConfig};
use shotlab::episodes::{batch_episodes, sample_episode};
use shotlab::icl::{attention_mask, icl_forward, predict, IclModel, IclModelConfig};
use shotlab::seed::rng_from;

fn main() -> shotlab::Result<()> {
    let m = 4;
    println!("mask for {m} supports + query (row attends to column):");
    for row in attention_mask(m)? {
        let cells: String = row.iter().map(|&v| if v { '#' } else { '.' }).collect();
        println!("  {cells}");
    }

    let set = generate_shapes(&ShapesSpec::new(6, 10, 32), 0)?;
    let encoder = build_encoder::<f64>(&EncoderConfig::residual(32, 16, ResidualConfig::compact()), 0)?;
    let config = IclModelConfig { n_max: 4, embed_dim: 16, heads: 2, layers: 2, feedforward_dim: 32, ..Default::default() };
    let model = IclModel::<f64>::new(&config, 0)?;

    let mut rng = rng_from(1);
    let episode = sample_episode(&set, 2, 2, 4, &mut rng)?;
    let mut swapped = episode.clone();
    let used = |id: &str| id == episode.query.id || episode.supports.iter().any(|s| s.id == id);
    let other = set
        .items()
        .iter()
        .find(|it| it.class_id == episode.query.class_id && !used(&it.id))
        .expect("class has a spare image");
    swapped.query = other.clone();

    let logits = icl_forward(&model, &batch_episodes(vec![episode.clone(), swapped])?, &encoder)?;
    for (name, i) in [("original query", 0), ("swapped query", 1)] {
        let row = logits.row(i);
        let slot = predict(row, &episode.active_slots())?;
        println!("{name}: logits {:?} -> slot {slot}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
