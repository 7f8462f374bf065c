//! Property tests for the invariants of matching, losses, metrics, data handling,
//! attention blocks and the optimiser.

use proptest::prelude::*;
use proptest::test_runner::Config;

use scb_detr::backbone::{Backbone, BackboneConfig, LskBlock};
use scb_detr::box_ops::{cxcywh_to_xyxy, giou, iou, smooth_l1_scalar};
use scb_detr::data::{batch_iter, Letterbox};
use scb_detr::decoder::{postprocess, Heads};
use scb_detr::eval::{average_precision, confusion_matrix, evaluate, precision_recall, EvalConfig, ImageEval, LabeledBox, ScoredBox};
use scb_detr::hffa::{CoordAttention, DeformAttn};
use scb_detr::loss::{build_cost_matrix, focal_scalar, hungarian_loss, GroundTruth, LossWeights};
use scb_detr::model::LayerOutput;
use scb_detr::nn::{Ctx, ParamBuilder, ParamStore};
use scb_detr::train::{adamw_step, clip_grad_norm, AdamHyper, AdamState};
use scb_tensor::{RngState, Tape, Tensor};

fn xyxy() -> impl Strategy<Value = [f64; 4]> {
    (0.0..10.0f64, 0.0..10.0f64, 0.01..5.0f64, 0.01..5.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn flags_strategy() -> impl Strategy<Value = (Vec<bool>, usize)> {
    prop::collection::vec(any::<bool>(), 0..20).prop_flat_map(|f| {
        let tp = f.iter().filter(|&&b| b).count();
        (Just(f), tp.max(1)..tp + 4)
    })
}

fn ap_of(flags: &[bool], gt: usize) -> f64 {
    let scores: Vec<f64> = (0..flags.len()).map(|i| 1.0 - i as f64 / 64.0).collect();
    average_precision(&precision_recall(flags, &scores, gt).1)
}

fn random_images(seed: u64, classes: usize) -> Vec<ImageEval> {
    let mut rng = RngState::new(seed);
    let b = |rng: &mut RngState| {
        let (x, y) = (rng.uniform_range(0.0, 50.0), rng.uniform_range(0.0, 50.0));
        [x, y, x + rng.uniform_range(5.0, 20.0), y + rng.uniform_range(5.0, 20.0)]
    };
    (0..rng.int_range(1, 4))
        .map(|_| {
            let gts: Vec<LabeledBox> =
                (0..rng.int_range(1, 6)).map(|_| LabeledBox { class_id: rng.int_range(0, classes - 1), bbox: b(&mut rng) }).collect();
            let dets = (0..rng.int_range(0, 8))
                .map(|i| {
                    let bbox = if i < gts.len() && rng.bernoulli(0.6) { gts[i].bbox } else { b(&mut rng) };
                    ScoredBox { class_id: rng.int_range(0, classes - 1), score: rng.uniform(), bbox }
                })
                .collect();
            ImageEval { dets, gts }
        })
        .collect()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

proptest! {
    #![proptest_config(Config { cases: 128, ..Config::default() })]

    #[test]
    fn giou_bounded_by_iou_and_symmetric(a in xyxy(), b in xyxy()) {
        let (g, i) = (giou(a, b), iou(a, b));
        prop_assert!(g <= i + 1e-15);
        prop_assert!((-1.0..=1.0).contains(&g) && (0.0..=1.0).contains(&i));
        prop_assert_eq!(g, giou(b, a));
        prop_assert_eq!(i, iou(b, a));
    }

    #[test]
    fn giou_equals_iou_for_nested_boxes(a in xyxy(), f in (0.0..0.5f64, 0.0..0.5f64, 0.0..0.5f64, 0.0..0.5f64)) {
        let (w, h) = (a[2] - a[0], a[3] - a[1]);
        let inner = [a[0] + f.0 * w, a[1] + f.1 * h, a[2] - f.2 * w, a[3] - f.3 * h];
        prop_assert!((giou(a, inner) - iou(a, inner)).abs() < 1e-12);
    }

    #[test]
    fn scaling_loss_weights_scales_cost_and_keeps_matching(
        seed in any::<u64>(), lambda in 0.01..100.0f64, p in 1usize..8, g in 0usize..6,
    ) {
        let mut rng = RngState::new(seed);
        let k = 3;
        let logits: Vec<f64> = (0..p * k).map(|_| rng.uniform_range(-4.0, 4.0)).collect();
        let boxes: Vec<f64> = (0..p * 4).map(|_| rng.uniform_range(0.1, 0.6)).collect();
        let gts: Vec<GroundTruth> = (0..g)
            .map(|_| GroundTruth { class_id: rng.int_range(0, k - 1), bbox: [0.5, 0.5, rng.uniform_range(0.05, 0.4), 0.3] })
            .collect();
        let w = LossWeights::default();
        let a = build_cost_matrix(&logits, &boxes, k, &gts, &w);
        let b = build_cost_matrix(&logits, &boxes, k, &gts, &w.scaled(lambda));
        for (x, y) in a.total.iter().zip(&b.total) {
            prop_assert!((x * lambda - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        prop_assert_eq!(a.solve().pairs, b.solve().pairs);

        let tape = Tape::<f64>::new();
        let out = [LayerOutput {
            logits: tape.constant(Tensor::new([p, k], logits).unwrap()),
            boxes: tape.constant(Tensor::new([p, 4], boxes).unwrap()),
        }];
        let (_, ra) = hungarian_loss(&out, &gts, &w).unwrap();
        let (_, rb) = hungarian_loss(&out, &gts, &w.scaled(lambda)).unwrap();
        prop_assert!((ra.total * lambda - rb.total).abs() <= 1e-9 * rb.total.abs().max(1.0));
        prop_assert!((ra.recompute_total(&w) - ra.total).abs() <= 1e-6);
    }

    #[test]
    fn ap_is_a_probability_and_rank_only((flags, gt) in flags_strategy(), seed in any::<u64>()) {
        let ap = ap_of(&flags, gt);
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut rng = RngState::new(seed);
        let mut scores: Vec<f64> = (0..flags.len()).map(|_| rng.uniform()).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let a = average_precision(&precision_recall(&flags, &scores, gt).1);
        let b = average_precision(&precision_recall(&flags, &warped, gt).1);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn trailing_fp_never_helps_and_trailing_tp_never_hurts((flags, gt) in flags_strategy()) {
        let ap = ap_of(&flags, gt);
        let mut with_fp = flags.clone();
        with_fp.push(false);
        prop_assert!(ap_of(&with_fp, gt) <= ap);
        if flags.iter().filter(|&&f| f).count() < gt {
            let mut with_tp = flags.clone();
            with_tp.push(true);
            prop_assert!(ap_of(&with_tp, gt) >= ap);
        }
    }

    #[test]
    fn pipeline_map_ignores_monotone_score_changes(seed in any::<u64>(), k in 1usize..4) {
        let images = random_images(seed, k);
        let warped: Vec<ImageEval> = images
            .iter()
            .map(|im| ImageEval {
                dets: im.dets.iter().map(|d| ScoredBox { score: d.score.powi(3) * 0.5, ..*d }).collect(),
                gts: im.gts.clone(),
            })
            .collect();
        let a = evaluate(&images, &names(k), &EvalConfig::default()).unwrap();
        let b = evaluate(&warped, &names(k), &EvalConfig::default()).unwrap();
        prop_assert_eq!(a.map, b.map);
        prop_assert_eq!(a.ap50, b.ap50);
        prop_assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn confusion_rows_count_ground_truth(seed in any::<u64>(), k in 1usize..5, score in 0.0..1.0f64) {
        let images = random_images(seed, k);
        let pairs: Vec<_> = images.iter().map(|im| (im.dets.as_slice(), im.gts.as_slice())).collect();
        let cm = confusion_matrix(&pairs, k, 0.5, score);
        let rows = cm.row_sums();
        for c in 0..k {
            let n = images.iter().flat_map(|im| &im.gts).filter(|g| g.class_id == c).count() as u64;
            prop_assert_eq!(rows[c], n);
        }
    }

    #[test]
    fn annotation_round_trip_within_a_millionth_pixel(
        w in 16usize..800, h in 16usize..800, size in (1usize..17).prop_map(|s| s * 32),
        f in (0.0..0.9f64, 0.0..0.9f64, 0.01..0.1f64, 0.01..0.1f64),
    ) {
        let lb = Letterbox::new(w, h, size);
        let px = [f.0 * w as f64, f.1 * h as f64, f.2 * w as f64, f.3 * h as f64];
        let back = lb.to_pixels(lb.to_normalized(px));
        for (a, b) in px.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", px, back);
        }
    }

    #[test]
    fn letterbox_preserves_iou(w in 16usize..800, h in 16usize..800, a in xyxy(), b in xyxy()) {
        let lb = Letterbox::new(w, h, 128);
        let to_xywh = |b: [f64; 4]| [b[0], b[1], b[2] - b[0], b[3] - b[1]];
        let na = cxcywh_to_xyxy(lb.to_normalized(to_xywh(a)));
        let nb = cxcywh_to_xyxy(lb.to_normalized(to_xywh(b)));
        prop_assert!((iou(a, b) - iou(na, nb)).abs() < 1e-9);
    }

    #[test]
    fn batches_partition_each_epoch(n in 1usize..40, bs in 1usize..7, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_iter(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batches, batch_iter(n, bs, seed, epoch).unwrap());
    }

    #[test]
    fn clipping_below_threshold_leaves_the_step_unchanged(seed in any::<u64>(), scale in 0.0..0.99f64) {
        let mut rng = RngState::new(seed);
        let params: Vec<Tensor<f32>> = vec![rng.normal_tensor([3, 4], 1.0), rng.normal_tensor([5], 1.0)];
        let mut grads: Vec<Tensor<f32>> = vec![rng.normal_tensor([3, 4], 1.0), rng.normal_tensor([5], 1.0)];
        let norm = scb_detr::train::global_norm(&grads);
        let max_norm = 0.1;
        let s = (scale * max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        let raw = grads.clone();
        let mut clipped = grads.clone();
        clip_grad_norm(&mut clipped, max_norm);
        prop_assert_eq!(&clipped, &raw);
        let h = AdamHyper { lr: 2e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let (mut pa, mut pb) = (params.clone(), params.clone());
        let (mut sa, mut sb) = (AdamState::new(&params), AdamState::new(&params));
        adamw_step(&mut pa, &raw, &mut sa, &h).unwrap();
        adamw_step(&mut pb, &clipped, &mut sb, &h).unwrap();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn postprocess_order_is_total(seed in any::<u64>(), q in 1usize..10, k in 1usize..5) {
        let mut rng = RngState::new(seed);
        // coarse logits force plenty of exact ties
        let logits: Vec<f32> = (0..q * k).map(|_| rng.int_range(0, 4) as f32 - 2.0).collect();
        let dets = postprocess(&Tensor::new([q, k], logits).unwrap(), &Tensor::full([q, 4], 0.5f32), 0.0, 100);
        prop_assert_eq!(dets.len(), q * k);
        for w in dets.windows(2) {
            let key = |d: &scb_detr::decoder::Detection| (std::cmp::Reverse(d.score.to_bits()), d.query, d.class_id);
            prop_assert!(key(&w[0]) < key(&w[1]));
        }
    }

    #[test]
    fn focal_decreases_in_p_for_positives(p in 0.001..0.998f64, dp in 0.0005..0.001f64) {
        prop_assert!(focal_scalar(p + dp, true, 0.25, 2.0) < focal_scalar(p, true, 0.25, 2.0));
    }
}

proptest! {
    #![proptest_config(Config { cases: 24, ..Config::default() })]

    #[test]
    fn attention_gates_are_probabilities(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let ca = CoordAttention::new(&mut ParamBuilder::new(&mut store, &mut rng).scope("ca"), 16, 4);
        let lsk = LskBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).scope("lsk"), 16);
        let deform = DeformAttn::new(&mut ParamBuilder::new(&mut store, &mut rng).scope("attn"), 16, 4, 3, 2);
        for v in store.values_mut() {
            *v = rng.normal_tensor(v.shape().to_vec(), 0.2);
        }
        let tape = Tape::<f64>::new();
        let ctx = Ctx::bind(&tape, &store, false);
        let x = tape.constant(rng.normal_tensor([16, h, w], 1.0));
        let (_, gh, gw) = ca.forward_with_gates(&ctx, x).unwrap();
        let (_, sel) = lsk.forward_with_gates(&ctx, x).unwrap();
        for g in [gh, gw, sel] {
            prop_assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let a = deform.attention_weights(&ctx, tape.constant(rng.normal_tensor([5, 16], 1.0))).unwrap().value();
        for chunk in a.data().chunks(3 * 2) {
            prop_assert!(chunk.iter().all(|&v| v >= 0.0));
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn predicted_boxes_stay_in_the_unit_box(seed in any::<u64>(), std in 0.1..20.0f64) {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let heads = Heads::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 3);
        for v in store.values_mut() {
            *v = rng.normal_tensor(v.shape().to_vec(), std);
        }
        let tape = Tape::<f32>::new();
        let ctx = Ctx::bind(&tape, &store, false);
        let (_, boxes) = heads.forward(&ctx, tape.constant(rng.normal_tensor([6, 8], std))).unwrap();
        prop_assert!(boxes.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(Config { cases: 6, ..Config::default() })]

    #[test]
    fn backbone_shape_law_on_rectangles(h in 2usize..=16, w in 2usize..=16) {
        let (h, w) = (h * 32, w * 32);
        let cfg = BackboneConfig { base_channels: 8, ..Default::default() };
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let backbone = Backbone::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let tape = Tape::<f32>::new().with_paranoid(false);
        let ctx = Ctx::bind(&tape, &store, false);
        let pyr = backbone.forward(&ctx, tape.constant(rng.normal_tensor([3, h, w], 1.0))).unwrap();
        for (i, level) in pyr.iter().enumerate() {
            prop_assert_eq!(level.shape(), &[8 << i, h >> (i + 2), w >> (i + 2)][..]);
        }
    }
}

#[test]
fn smooth_l1_is_c1_at_the_knot() {
    let h = 1e-6;
    for knot in [1.0f64, -1.0] {
        let left = (smooth_l1_scalar(knot) - smooth_l1_scalar(knot - h)) / h;
        let right = (smooth_l1_scalar(knot + h) - smooth_l1_scalar(knot)) / h;
        assert!((left - right).abs() < 1e-5, "{left} vs {right}");
        assert!((left.abs() - 1.0).abs() < 1e-5);
        assert!((smooth_l1_scalar(knot - 1e-12) - 0.5).abs() < 1e-11);
    }
}
