//! Sweeps the number of shots per class for a nearest-neighbour predictor
//! and writes the accuracy curve as CSV and SVG.
//!
//! cargo run --release --example context_sweep -- [out_dir]

use std::path::PathBuf;

use shotlab::datasets::{generate_shapes, split_classes, ShapesSpec};
use shotlab::encoders::{build_encoder, EncoderConfig, ResidualConfig};
use shotlab::evaluation::{context_sweep, format_percent, KnnPredictor};
use shotlab::pretraining::{pretrain_encoder, PretrainConfig};

fn main() -> shotlab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("shotlab-sweep"));
    std::fs::create_dir_all(&out)?;

    let set = generate_shapes(&ShapesSpec::new(16, 40, 32), 2)?;
    let (train, holdout) = split_classes(&set, 5, 0)?;
    let encoder = build_encoder::<f32>(&EncoderConfig::residual(32, 64, ResidualConfig::compact()), 0)?;
    let (encoder, _) = pretrain_encoder(&train, encoder, &PretrainConfig { epochs: 8, ..Default::default() }, |_| {})?;

    // one neighbour so that k = 1 is valid
    let knn = KnnPredictor { encoder: &encoder, k_neighbors: 1 };
    let table = context_sweep(&knn, &holdout, 5, &[1, 2, 3, 5, 8, 10], 400, 10, 0)?;
    for row in &table.rows {
        println!("k = {:>2}: {}", row.k, format_percent(row.mean_acc, row.std_err));
    }
    std::fs::write(out.join("sweep.csv"), table.to_csv())?;
    std::fs::write(out.join("sweep.svg"), table.to_svg())?;
    println!("wrote {}", out.display());
    Ok(())
}
