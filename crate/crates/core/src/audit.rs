//! Finite-difference audit of every differentiable op, composite block and loss
//! term, on small random instances.

use scb_tensor::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, Objective};
use scb_tensor::{Conv2dOptions, Real, RngState, Tape, Tensor, Var};

use crate::backbone::{ConvNeXtBlock, LskBlock};
use crate::box_ops::{cxcywh_to_xyxy, xyxy_to_cxcywh};
use crate::decoder::DecoderLayer;
use crate::error::{Error, Result};
use crate::hffa::{level_shapes, ms_deform_attn_core, CoordAttention, DeformAttn, EncoderLayer, LevelShape, Memory};
use crate::loss::{focal_loss, giou_loss, hungarian_loss, smooth_l1_loss, GroundTruth, LossWeights};
use crate::model::LayerOutput;
use crate::nn::{Ctx, ParamBuilder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Step and tolerance: `h = 1e-3, tol 1e-3` in single, `h = 1e-5, tol 1e-5` in double.
    pub fn options(self, seed: u64) -> GradCheckOptions {
        match self {
            Precision::Single => GradCheckOptions { step: 1e-3, tolerance: 1e-3, samples_per_param: 12, seed },
            Precision::Double => GradCheckOptions { step: 1e-5, tolerance: 1e-5, samples_per_param: 12, seed },
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuditResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Relu,
    MaxReduce,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Matmul,
    Conv,
    Depthwise,
    Upsample,
    Bilinear,
    DeformCore,
}

enum Kind {
    Op(Op),
    ConvNeXt(ConvNeXtBlock),
    Lsk(LskBlock),
    CoordAttn(CoordAttention),
    Deform(DeformAttn, Vec<LevelShape>),
    Encoder(EncoderLayer, Vec<LevelShape>),
    Decoder(DecoderLayer, Vec<LevelShape>),
    Focal(Vec<bool>),
    SmoothL1(Vec<[f64; 4]>),
    Giou(Vec<[f64; 4]>),
    Criterion(Vec<GroundTruth>),
}

/// `sum(f(inputs, weights) * probe)` for a fixed random `probe`.
struct Case {
    kind: Kind,
    inputs: usize,
    probe: Option<Tensor<f64>>,
    /// Weights held constant, by position in the block's parameter list.
    fixed: Vec<(usize, Tensor<f64>)>,
}

impl Objective for Case {
    type Error = Error;

    fn loss<'t, T: Real>(&self, tape: &'t Tape<T>, params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (x, w) = params.split_at(self.inputs);
        let mut w = w.to_vec();
        for (i, t) in &self.fixed {
            w.insert(*i, tape.constant(t.cast()));
        }
        let ctx = Ctx::from_vars(tape, w);
        let y = match &self.kind {
            Kind::Op(op) => op_forward(*op, x)?,
            Kind::ConvNeXt(b) => b.forward(&ctx, x[0])?,
            Kind::Lsk(b) => b.forward(&ctx, x[0])?,
            Kind::CoordAttn(b) => b.forward(&ctx, x[0])?,
            Kind::Deform(b, lv) => b.forward(&ctx, x[0], x[1], x[2], lv)?,
            Kind::Encoder(b, lv) => b.forward(&ctx, x[0], x[1], x[2], lv)?,
            Kind::Decoder(b, lv) => {
                let memory = Memory { tokens: x[3], levels: lv.clone() };
                b.forward(&ctx, x[0], x[1], x[2], &memory)?
            }
            Kind::Focal(t) => return focal_loss(x[0], t, 0.25, 2.0),
            Kind::SmoothL1(t) => return smooth_l1_loss(x[0], t),
            Kind::Giou(t) => return giou_loss(x[0], t),
            Kind::Criterion(gts) => {
                let outs: Vec<LayerOutput<'t, T>> = x
                    .chunks(2)
                    .map(|c| Ok(LayerOutput { logits: c[0], boxes: c[1].sigmoid()? }))
                    .collect::<Result<_>>()?;
                return Ok(hungarian_loss(&outs, gts, &LossWeights::default())?.0);
            }
        };
        let probe = self.probe.as_ref().expect("block cases carry a probe");
        Ok(y.mul(tape.constant(probe.cast()))?.sum_all()?)
    }
}

fn op_forward<'t, T: Real>(op: Op, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    Ok(match op {
        Op::Relu => x[0].relu()?,
        Op::MaxReduce => x[0].max(&[0], false)?,
        Op::Gelu => x[0].gelu()?,
        Op::Sigmoid => x[0].sigmoid()?,
        Op::Softmax => x[0].softmax(-1)?,
        Op::LayerNorm => x[0].layer_norm(x[1], x[2], 0, 1e-6)?,
        Op::Matmul => x[0].matmul(x[1])?,
        Op::Conv => x[0].conv2d(x[1], Some(x[2]), Conv2dOptions::default().padding(1).stride(2))?,
        Op::Depthwise => x[0].conv2d(x[1], None, Conv2dOptions::default().padding(2).dilation(2).groups(3))?,
        Op::Upsample => x[0].upsample_nearest2x(5, 6)?,
        Op::Bilinear => x[0].bilinear_sample(x[1])?,
        Op::DeformCore => ms_deform_attn_core(x[0], &level_shapes(&[(5, 6), (3, 4)]), x[1], x[2], x[3])?,
    })
}

fn normal(rng: &mut RngState, shape: &[usize], std: f64) -> Tensor<f64> {
    rng.normal_tensor::<f64>(shape.to_vec(), std)
}

fn uniform(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rng.uniform_tensor::<f64>(shape.to_vec(), lo, hi)
}

/// Normalised `(x, y)` points `[n, L, 2]`, one per level, whose pixel coordinates
/// sit at least 0.3 px from texel centres, where bilinear interpolation has kinks.
fn level_points(rng: &mut RngState, n: usize, levels: &[(usize, usize)]) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * levels.len() * 2);
    for _ in 0..n {
        for &(h, w) in levels {
            for size in [w, h] {
                let px = rng.int_range(0, size) as f64 + rng.uniform_range(0.3, 0.7);
                data.push((px + 0.5) / size as f64);
            }
        }
    }
    Tensor::new([n, levels.len(), 2], data).expect("points")
}

/// Weights of a freshly built block, perturbed so zero-initialised projections
/// take part in the check.
struct Weights {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
}

impl Weights {
    fn index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    /// Shifts one entry, used to keep a max reduction away from ties.
    fn shift(&mut self, name: &str, at: usize, delta: f64) {
        let i = self.index(name);
        let mut d = self.values[i].data().to_vec();
        d[at] += delta;
        self.values[i] = Tensor::new(self.values[i].shape().to_vec(), d).expect("same shape");
    }

    /// Feed-forward hidden biases of alternating sign, so every ReLU preactivation
    /// stays well away from zero and both sides of the kink are exercised.
    fn split_relu(&mut self, name: &str) {
        let i = self.index(name);
        let d = (0..self.values[i].numel()).map(|k| if k % 2 == 0 { 3.0 } else { -3.0 }).collect();
        self.values[i] = Tensor::new(self.values[i].shape().to_vec(), d).expect("same shape");
    }
}

fn construct<B>(rng: &mut RngState, noise_std: impl Fn(&str) -> f64, build: impl FnOnce(&mut ParamBuilder) -> B) -> (B, Weights) {
    let mut store = ParamStore::new();
    let mut init = rng.split(1);
    let block = build(&mut ParamBuilder::new(&mut store, &mut init));
    let (mut names, mut values) = (Vec::new(), Vec::new());
    for (name, t) in store.iter() {
        let noise = normal(rng, t.shape(), noise_std(name));
        let base: Tensor<f64> = t.cast();
        values.push(Tensor::from_fn(t.shape().to_vec(), |i| base.data()[i] + noise.data()[i]));
        names.push(name.to_string());
    }
    (block, Weights { names, values })
}

/// Learned sampling offsets keep the direction-grid bias (whole pixels) plus a small
/// perturbation, so sample points stay where the reference points put them: clear
/// of texel centres, where bilinear interpolation has kinks.
fn attention_noise(name: &str) -> f64 {
    if name.contains("sampling_offsets") {
        0.005
    } else {
        0.2
    }
}

fn block_case(kind: Kind, inputs: Vec<Tensor<f64>>, w: Weights, frozen: &[&str], out_shape: &[usize], rng: &mut RngState) -> (Case, Vec<Tensor<f64>>) {
    let probe = Some(normal(rng, out_shape, 1.0));
    let n = inputs.len();
    let mut checked = Vec::new();
    let mut fixed = Vec::new();
    for (i, (name, t)) in w.names.iter().zip(w.values).enumerate() {
        if frozen.iter().any(|f| name.ends_with(f)) {
            fixed.push((i, t));
        } else {
            checked.push(t);
        }
    }
    (Case { kind, inputs: n, probe, fixed }, inputs.into_iter().chain(checked).collect())
}

/// Names of all audited cases, in suite order.
pub const CASES: [&str; 23] = [
    "op.relu",
    "op.max_reduce",
    "op.gelu",
    "op.sigmoid",
    "op.softmax",
    "op.layer_norm",
    "op.matmul",
    "op.conv2d",
    "op.depthwise_dilated",
    "op.upsample_nearest",
    "op.bilinear_sample",
    "op.ms_deform_core",
    "block.convnext",
    "block.lsk",
    "block.coord_attention",
    "block.deform_attention",
    "block.encoder_layer",
    "block.decoder_layer",
    "loss.focal",
    "loss.smooth_l1",
    "loss.giou",
    "loss.hungarian_criterion",
    "loss.criterion_zero_gt",
];

fn build(name: &str, seed: u64) -> (Case, Vec<Tensor<f64>>) {
    let mut rng = RngState::new(seed).split(name.len() as u64 * 7919 + name.bytes().map(u64::from).sum::<u64>());
    let r = &mut rng;
    let op = |op: Op, inputs: Vec<Tensor<f64>>, out: &[usize], r: &mut RngState| block_case(Kind::Op(op), inputs, Weights { names: vec![], values: vec![] }, &[], out, r);
    let (d, heads, points) = (8, 2, 2);
    let grid = [(5, 6), (3, 4)];
    let lv = level_shapes(&grid);
    let n_tok = 42;
    match name {
        "op.relu" => {
            let x = Tensor::from_fn([3, 4], |_| if r.bernoulli(0.5) { 1.0 } else { -1.0 } * r.uniform_range(0.2, 2.0));
            op(Op::Relu, vec![x], &[3, 4], r)
        }
        "op.max_reduce" => {
            // distinct values 0.25 apart, so no two compete for the maximum
            let mut v: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 + r.uniform_range(-0.05, 0.05)).collect();
            r.shuffle(&mut v);
            op(Op::MaxReduce, vec![Tensor::new([4, 3, 2], v).expect("values")], &[3, 2], r)
        }
        "op.gelu" => op(Op::Gelu, vec![normal(r, &[3, 4], 1.5)], &[3, 4], r),
        "op.sigmoid" => op(Op::Sigmoid, vec![normal(r, &[3, 4], 2.0)], &[3, 4], r),
        "op.softmax" => op(Op::Softmax, vec![normal(r, &[3, 5], 1.0)], &[3, 5], r),
        "op.layer_norm" => {
            let x = vec![normal(r, &[4, 3, 2], 1.0), uniform(r, &[4], 0.5, 1.5), normal(r, &[4], 0.3)];
            op(Op::LayerNorm, x, &[4, 3, 2], r)
        }
        "op.matmul" => op(Op::Matmul, vec![normal(r, &[2, 3, 4], 1.0), normal(r, &[4, 5], 1.0)], &[2, 3, 5], r),
        "op.conv2d" => {
            let x = vec![normal(r, &[2, 5, 5], 1.0), normal(r, &[3, 2, 3, 3], 0.5), normal(r, &[3], 0.5)];
            op(Op::Conv, x, &[3, 3, 3], r)
        }
        "op.depthwise_dilated" => {
            op(Op::Depthwise, vec![normal(r, &[3, 6, 5], 1.0), normal(r, &[3, 1, 3, 3], 0.5)], &[3, 6, 5], r)
        }
        "op.upsample_nearest" => op(Op::Upsample, vec![normal(r, &[2, 3, 3], 1.0)], &[2, 5, 6], r),
        "op.bilinear_sample" => {
            let x = vec![normal(r, &[2, 4, 5], 1.0), level_points(r, 6, &[(4, 5)]).reshape([6, 2]).expect("points")];
            op(Op::Bilinear, x, &[6, 2], r)
        }
        "op.ms_deform_core" => {
            let q = 3;
            let refs = level_points(r, q, &grid);
            let x = vec![
                normal(r, &[n_tok, 4], 1.0),
                refs,
                uniform(r, &[q, 2, 2, 2, 2], -0.15, 0.15),
                uniform(r, &[q, 2, 2, 2], 0.1, 1.0),
            ];
            op(Op::DeformCore, x, &[q, 4], r)
        }
        "block.convnext" => {
            let (block, w) = construct(r, |_| 0.2, |pb| ConvNeXtBlock::new(pb, 4, 0.0));
            block_case(Kind::ConvNeXt(block), vec![normal(r, &[4, 6, 6], 1.0)], w, &[], &[4, 6, 6], r)
        }
        "block.lsk" => {
            // a 7x7 two-channel fuse kernel saturates the gates unless kept small
            let noise = |n: &str| if n.starts_with("fuse") { 0.03 } else { 0.2 };
            let (block, mut w) = construct(r, noise, |pb| LskBlock::new(pb, 4));
            // one selection channel dominates so the channel max never switches
            w.shift("squeeze2.bias", 1, 3.0);
            block_case(Kind::Lsk(block), vec![normal(r, &[4, 6, 6], 1.0)], w, &[], &[4, 6, 6], r)
        }
        "block.coord_attention" => {
            let (block, w) = construct(r, |_| 0.2, |pb| CoordAttention::new(pb, d, 8));
            block_case(Kind::CoordAttn(block), vec![normal(r, &[d, 4, 5], 1.0)], w, &[], &[d, 4, 5], r)
        }
        "block.deform_attention" => {
            let q = 3;
            let (block, w) = construct(r, attention_noise, |pb| DeformAttn::new(pb, d, heads, 2, points));
            let refs = level_points(r, q, &grid);
            let x = vec![normal(r, &[q, d], 1.0), refs, normal(r, &[n_tok, d], 1.0)];
            block_case(Kind::Deform(block, lv), x, w, &[], &[q, d], r)
        }
        "block.encoder_layer" => {
            let (block, mut w) = construct(r, attention_noise, |pb| EncoderLayer::new(pb, d, heads, 2, points));
            w.split_relu("ffn.fc1.bias");
            let refs = level_points(r, n_tok, &grid);
            let x = vec![normal(r, &[n_tok, d], 1.0), normal(r, &[n_tok, d], 0.5), refs];
            block_case(Kind::Encoder(block, lv), x, w, &[], &[n_tok, d], r)
        }
        "block.decoder_layer" => {
            let q = 3;
            let (block, mut w) = construct(r, attention_noise, |pb| DecoderLayer::new(pb, d, heads, 2, points));
            w.split_relu("ffn.fc1.bias");
            let refs = level_points(r, q, &grid);
            let x = vec![normal(r, &[q, d], 1.0), normal(r, &[q, d], 0.5), refs, normal(r, &[n_tok, d], 1.0)];
            // the key bias cancels in the softmax, so its gradient is identically zero
            block_case(Kind::Decoder(block, lv), x, w, &["self_attn.k_proj.bias"], &[q, d], r)
        }
        "loss.focal" => {
            let targets = (0..15).map(|_| r.bernoulli(0.3)).collect();
            (Case { kind: Kind::Focal(targets), inputs: 1, probe: None, fixed: vec![] }, vec![uniform(r, &[5, 3], -2.5, 2.5)])
        }
        "loss.smooth_l1" => {
            // differences straddle the knot at |d| = 1
            let t = (0..4).map(|_| std::array::from_fn(|_| r.uniform_range(-1.5, 1.5))).collect();
            (Case { kind: Kind::SmoothL1(t), inputs: 1, probe: None, fixed: vec![] }, vec![normal(r, &[4, 4], 1.0)])
        }
        "loss.giou" => {
            // predictions overlap their targets with every edge at least 0.02 away, plus
            // one disjoint pair, so no min/max or clamp inside the GIoU sits at a tie
            let (mut t, mut p) = (Vec::new(), Vec::new());
            for i in 0..4 {
                let (cx, cy) = (r.uniform_range(0.35, 0.65), r.uniform_range(0.35, 0.65));
                let (w, h) = (r.uniform_range(0.2, 0.4), r.uniform_range(0.2, 0.4));
                let target = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
                // both edges of an axis move the same way: a box nested inside another
                // along an axis would have an exactly zero centre gradient there
                let signs: [f64; 2] = std::array::from_fn(|_| if r.bernoulli(0.5) { 1.0 } else { -1.0 });
                let mut pred: [f64; 4] = std::array::from_fn(|k| target[k] + signs[k % 2] * r.uniform_range(0.02, 0.06));
                if i == 3 {
                    let dx = pred[2] - pred[0] + w + 0.05;
                    pred[0] += dx;
                    pred[2] += dx;
                }
                t.push(xyxy_to_cxcywh(target));
                p.extend(xyxy_to_cxcywh(pred));
            }
            (Case { kind: Kind::Giou(t), inputs: 1, probe: None, fixed: vec![] }, vec![Tensor::new([4, 4], p).expect("boxes")])
        }
        "loss.hungarian_criterion" | "loss.criterion_zero_gt" => {
            let gts = if name.ends_with("zero_gt") {
                vec![]
            } else {
                (0..2)
                    .map(|_| GroundTruth {
                        class_id: r.int_range(0, 2),
                        bbox: [r.uniform_range(0.3, 0.7), r.uniform_range(0.3, 0.7), r.uniform_range(0.1, 0.3), r.uniform_range(0.1, 0.3)],
                    })
                    .collect()
            };
            // query 2j+1 sits near ground truth j with a confident class score, so the
            // assignment has a wide margin and stays put under perturbation
            let mut x = Vec::new();
            for _ in 0..2 {
                let mut logits = uniform(r, &[5, 3], -1.5, 1.5).data().to_vec();
                // distractor queries sit small and near the corners, far from every ground truth
                let mut raw: Vec<f64> = (0..5)
                    .flat_map(|_| {
                        let corner = |r: &mut RngState| if r.bernoulli(0.5) { 0.1 } else { 0.9 };
                        [corner(r) + r.uniform_range(-0.03, 0.03), corner(r) + r.uniform_range(-0.03, 0.03), r.uniform_range(0.04, 0.08), r.uniform_range(0.04, 0.08)]
                    })
                    .map(|b: f64| (b / (1.0 - b)).ln())
                    .collect();
                for (j, g) in gts.iter().enumerate() {
                    let q = 2 * j + 1;
                    logits[q * 3 + g.class_id] += 1.5;
                    // edges kept 0.02 or more from the target's so the GIoU has no ties
                    let t = cxcywh_to_xyxy(g.bbox);
                    let signs: [f64; 2] = std::array::from_fn(|_| if r.bernoulli(0.5) { 1.0 } else { -1.0 });
                    let b = xyxy_to_cxcywh(std::array::from_fn(|k| t[k] + signs[k % 2] * r.uniform_range(0.02, 0.05)));
                    for k in 0..4 {
                        raw[q * 4 + k] = (b[k] / (1.0 - b[k])).ln();
                    }
                }
                x.push(Tensor::new([5, 3], logits).expect("logits"));
                x.push(Tensor::new([5, 4], raw).expect("boxes"));
            }
            (Case { kind: Kind::Criterion(gts), inputs: 4, probe: None, fixed: vec![] }, x)
        }
        other => panic!("unknown audit case {other}"),
    }
}

/// Runs one named case for one seed.
pub fn run_case(name: &'static str, seed: u64, precision: Precision) -> Result<AuditResult> {
    check_case(name, seed, precision, &precision.options(seed))
}

/// As [`run_case`] with explicit finite-difference options.
pub fn check_case(name: &'static str, seed: u64, precision: Precision, opts: &GradCheckOptions) -> Result<AuditResult> {
    let (case, params) = build(name, seed);
    let opts = *opts;
    let report = match precision {
        Precision::Single => finite_diff_check::<f32, _>(&case, &params, &opts)?,
        Precision::Double => finite_diff_check::<f64, _>(&case, &params, &opts)?,
    };
    Ok(AuditResult { name, seed, report })
}

/// Every case for each seed in `seeds`; `tolerance` overrides the default when given.
pub fn run_suite(precision: Precision, seeds: &[u64], tolerance: Option<f64>, mut each: impl FnMut(&AuditResult)) -> Result<Vec<AuditResult>> {
    let mut out = Vec::new();
    for &name in &CASES {
        for &seed in seeds {
            let mut r = run_case(name, seed, precision)?;
            if let Some(t) = tolerance {
                r.report.tolerance = t;
            }
            each(&r);
            out.push(r);
        }
    }
    Ok(out)
}
