//! Generates a synthetic shapes corpus, writes it as an image folder and
//! splits it into training and held-out classes.
//!
//! cargo run --example shapes_corpus -- [out_dir]

use std::path::PathBuf;

use shotlab::datasets::{generate_shapes, load_image_folder, split_classes, write_image_folder, ShapesSpec};

fn main() -> shotlab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("shotlab-shapes"));

    let spec = ShapesSpec::new(12, 20, 32);
    let set = generate_shapes(&spec, 7)?;
    println!("{} images, {} classes, {:?} pixels", set.len(), set.num_classes(), set.image_size());
    for name in set.class_names().iter().take(4) {
        println!("  {name}");
    }

    write_image_folder(&set, &out)?;
    let reloaded = load_image_folder(&out, spec.image_size)?;
    assert_eq!(reloaded.len(), set.len());
    println!("wrote and reloaded {}", out.display());

    let (train, holdout) = split_classes(&reloaded, 4, 0)?;
    println!("train classes: {:?}", train.class_names());
    println!("held-out classes: {:?}", holdout.class_names());
    Ok(())
}
