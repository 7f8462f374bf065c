//! Builds the matching cost between a handful of predictions and ground-truth
//! boxes, solves the assignment and shows the resulting loss terms.
//!
//!     cargo run -p scb-detr --example hungarian_matching

use scb_detr::loss::{build_cost_matrix, hungarian_loss, GroundTruth, LossWeights};
use scb_detr::model::LayerOutput;
use scb_tensor::{Tape, Tensor};

fn main() -> scb_detr::Result<()> {
    let gts = [
        GroundTruth { class_id: 0, bbox: [0.25, 0.30, 0.20, 0.30] },
        GroundTruth { class_id: 1, bbox: [0.70, 0.60, 0.30, 0.25] },
    ];
    // four queries over two classes; query 1 and 3 sit near the objects
    let logits = vec![-2.0, -2.5, 1.5, -1.0, -1.8, -2.2, -0.5, 2.0];
    let boxes = vec![0.5, 0.5, 0.4, 0.4, 0.27, 0.32, 0.18, 0.28, 0.1, 0.9, 0.1, 0.1, 0.68, 0.61, 0.31, 0.22];
    let w = LossWeights::default();

    let cost = build_cost_matrix(&logits, &boxes, 2, &gts, &w);
    println!("cost matrix (rows = queries):");
    for p in 0..cost.preds {
        let row: Vec<String> = (0..cost.gts).map(|g| format!("{:7.3}", cost.get(p, g))).collect();
        println!("  q{p} {}", row.join(" "));
    }
    let m = cost.solve();
    println!("matched pairs {:?}, total cost {:.4}", m.pairs, m.cost);

    let tape = Tape::<f64>::new();
    let box_var = tape.param(Tensor::new([4, 4], boxes).expect("4x4 boxes"));
    let out = LayerOutput { logits: tape.param(Tensor::new([4, 2], logits).expect("4x2 logits")), boxes: box_var };
    let (loss, report) = hungarian_loss(&[out], &gts, &w)?;
    println!("loss {:.4}: cls {:.4}  l1 {:.4}  giou {:.4}", loss.item(), report.cls, report.l1, report.giou);
    let mut grads = tape.backward(loss)?;
    let g = grads.take(box_var);
    println!("box gradient of query 1: {:?}", &g.data()[4..8]);
    Ok(())
}
