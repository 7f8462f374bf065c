//! Scores hand-made detections against ground truth and writes the
//! precision-recall curve.
//!
//!     cargo run -p scb-detr --example evaluate_detections -- [pr.csv]

use scb_detr::eval::{evaluate, pooled_curve, write_pr_csv, EvalConfig, ImageEval, LabeledBox, ScoredBox};

fn main() -> scb_detr::Result<()> {
    let names = vec!["read".to_string(), "write".to_string()];
    let gt = |class_id, bbox| LabeledBox { class_id, bbox };
    let det = |class_id, score, bbox| ScoredBox { class_id, score, bbox };
    let images = vec![
        ImageEval {
            gts: vec![gt(0, [10.0, 10.0, 50.0, 60.0]), gt(1, [70.0, 20.0, 110.0, 90.0])],
            dets: vec![
                det(0, 0.95, [12.0, 11.0, 49.0, 62.0]),
                det(1, 0.80, [72.0, 25.0, 108.0, 95.0]),
                det(0, 0.40, [60.0, 60.0, 90.0, 90.0]),
            ],
        },
        ImageEval {
            gts: vec![gt(0, [30.0, 30.0, 80.0, 80.0])],
            dets: vec![det(1, 0.70, [30.0, 30.0, 80.0, 80.0]), det(0, 0.65, [35.0, 28.0, 82.0, 85.0])],
        },
    ];
    let cfg = EvalConfig::default();
    let report = evaluate(&images, &names, &cfg)?;
    println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}  AR100 {:.4}", report.map, report.ap50, report.ap75, report.ar100);
    for c in &report.per_class {
        println!("  {:<6} {} gt  AP {:.4}", c.name, c.gt_count, c.ap_mean.unwrap_or(f64::NAN));
    }
    println!("confusion (rows gt, cols predicted, last row and column background):");
    for row in &report.confusion.counts {
        println!("  {row:?}");
    }

    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("scb-pr.csv").display().to_string());
    write_pr_csv(&pooled_curve(&images, names.len(), 0.5, cfg.max_dets), path.as_ref())?;
    println!("PR curve written to {path}");
    Ok(())
}
