//! Runs a checkpoint on one image and prints the detections in pixels.
//!
//!     cargo run --release -p scb-detr --example infer_image -- CKPT IMAGE [score-thresh]

use scb_detr::data::read_image;
use scb_detr::inference::{infer_image, load_detector};
use scb_detr::train::Checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (Some(ckpt), Some(image)) = (args.first(), args.get(1)) else {
        return Err("usage: infer_image CKPT IMAGE [score-thresh]".into());
    };
    let thresh = args.get(2).map_or(Ok(0.5), |s| s.parse())?;

    let ck = Checkpoint::load(ckpt.as_ref())?;
    let (model, store) = load_detector(&ck)?;
    let img = read_image(image.as_ref())?;
    let dets = infer_image(&model, &store, &img, &ck.config.data, &ck.class_names, thresh)?;
    println!("{} detections above {thresh} in {}x{} image (checkpoint step {})", dets.len(), img.width, img.height, ck.step);
    for d in &dets {
        let [x1, y1, x2, y2] = d.bbox;
        println!("  {:<16} {:.3}  [{x1:.1}, {y1:.1}, {x2:.1}, {y2:.1}]", d.class_name, d.score);
    }
    Ok(())
}
