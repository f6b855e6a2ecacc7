//! Generates the synthetic shapes dataset, caches it and writes a preview grid.
//!
//! cargo run --example synth_data -- [out_dir]

use candle_core::Device;
use prologue::data::{synth_shapes, Dataset};
use prologue::plot::image_grid;

fn main() -> prologue::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/examples/synth".into());
    std::fs::create_dir_all(&out)?;
    let ds = synth_shapes(0, 10, 64, 32)?;
    println!("{} images, {} classes, {}x{}", ds.len(), ds.num_classes, ds.size, ds.size);
    println!("class counts {:?}", ds.class_counts());

    let cache = std::path::Path::new(&out).join("shapes.bin");
    ds.save_cache(&cache)?;
    let back = Dataset::load_cache(&cache)?;
    assert_eq!(back.pixels(), ds.pixels());

    let (train, holdout) = ds.split(0.125)?;
    println!("train {} / holdout {}", train.len(), holdout.len());

    let idx: Vec<usize> = (0..10).flat_map(|c| (0..8).map(move |i| c * 64 + i)).collect();
    let batch = ds.batch(&idx, &Device::Cpu)?;
    let png = std::path::Path::new(&out).join("shapes.png");
    image_grid(&batch.pixels, 10, 8)?.save(&png)?;
    println!("preview {}", png.display());
    Ok(())
}
