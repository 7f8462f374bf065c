//! Synthesises a small dataset, overfits the toy detector on it and reports
//! training-set AP.
//!
//!     cargo run --release -p scb-detr --example train_toy -- [steps] [lr] [out-dir] [lr-decay-step]

use std::path::PathBuf;

use scb_detr::data::{synth_generate, SynthConfig};
use scb_detr::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map_or(Ok(300), |s| s.parse())?;
    let out = args.get(2).map_or_else(|| std::env::temp_dir().join("scb-train-toy"), PathBuf::from);

    let data_dir = out.join("data");
    let synth = SynthConfig { images: 16, seed: 42, ..Default::default() };
    synth_generate(&synth, &data_dir)?;

    let mut cfg = TrainConfig::toy();
    cfg.data.dir = data_dir;
    cfg.steps = steps;
    if let Some(lr) = args.get(1) {
        cfg.optim.lr = lr.parse()?;
    }
    if let Some(every) = args.get(3) {
        cfg.optim.lr_decay_every = every.parse()?;
    }
    let t0 = std::time::Instant::now();
    let summary = train(&cfg, &out.join("run"), None, |r| {
        if r.step == 1 || r.step % 50 == 0 {
            println!(
                "step {:5}  loss {:8.4}  cls {:.4}  l1 {:.4}  giou {:.4}  |g| {:.3}  {:.0}s",
                r.step,
                r.total,
                r.cls,
                r.l1,
                r.giou,
                r.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let head: f64 = summary.records.iter().take(10).map(|r| r.total).sum::<f64>() / 10f64.min(summary.records.len() as f64);
    let n = summary.records.len();
    let tail: f64 = summary.records[n.saturating_sub(10)..].iter().map(|r| r.total).sum::<f64>() / 10f64.min(n as f64);
    println!("first-10 mean {head:.4}  last-10 mean {tail:.4}  ratio {:.3}", tail / head);
    if let Some(e) = summary.last_eval {
        println!("train-set mAP {:.4}  AP50 {:.4}  AR100 {:.4}", e.map, e.ap50, e.ar100);
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}
