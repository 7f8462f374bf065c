//! Writes a synthetic detection dataset and prints its label table.
//!
//!     cargo run -p scb-detr --example synth_dataset -- [out-dir] [images] [seed]

use std::path::PathBuf;

use scb_detr::data::coco::DatasetIndex;
use scb_detr::data::{synth_generate, LabelManifest, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or_else(|| std::env::temp_dir().join("scb-synth"), PathBuf::from);
    let images = args.get(1).map_or(Ok(40), |s| s.parse())?;
    let seed = args.get(2).map_or(Ok(42), |s| s.parse())?;

    let cfg = SynthConfig { images, seed, classes: 5, max_objects: 6, ..Default::default() };
    let file = synth_generate(&cfg, &out)?;
    let splits = ["train", "val", "test"].map(|s| file.images.iter().filter(|i| i.split.as_deref() == Some(s)).count());
    println!("{} images (train {}, val {}, test {}) in {}", file.images.len(), splits[0], splits[1], splits[2], out.display());

    let manifest = LabelManifest::from_index(&DatasetIndex::from_file(file, &out.join("annotations.json"))?);
    for c in &manifest.categories {
        println!("  {:<16} {:5}", c.name, c.count);
    }
    println!("  {:<16} {:5}", "total", manifest.total);
    manifest.write(&out.join("labels.json"))?;
    Ok(())
}
