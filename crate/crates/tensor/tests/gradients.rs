//! Every differentiable op against central differences, in both precisions.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use scb_tensor::gradcheck::{finite_diff_check, value_and_grad, GradCheckOptions, Objective};
use scb_tensor::{Conv2dOptions, Real, RngState, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
enum Case {
    AddBroadcast,
    SubBroadcast,
    MulBroadcast,
    Div,
    Maximum,
    Minimum,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    Abs,
    Clamp,
    SumAxes,
    MeanAxes,
    MaxAxes,
    Softmax,
    LayerNorm,
    MatmulBatched,
    Linear,
    Conv,
    ConvStrided,
    ConvDepthwiseDilated,
    ConvGrouped,
    ConvBatched,
    Upsample,
    Permute,
    Concat,
    Narrow,
    IndexSelect,
    BroadcastTo,
    BilinearSample,
}

const ALL: &[Case] = &[
    Case::AddBroadcast,
    Case::SubBroadcast,
    Case::MulBroadcast,
    Case::Div,
    Case::Maximum,
    Case::Minimum,
    Case::Exp,
    Case::Ln,
    Case::Sqrt,
    Case::Tanh,
    Case::Sigmoid,
    Case::Gelu,
    Case::Relu,
    Case::Abs,
    Case::Clamp,
    Case::SumAxes,
    Case::MeanAxes,
    Case::MaxAxes,
    Case::Softmax,
    Case::LayerNorm,
    Case::MatmulBatched,
    Case::Linear,
    Case::Conv,
    Case::ConvStrided,
    Case::ConvDepthwiseDilated,
    Case::ConvGrouped,
    Case::ConvBatched,
    Case::Upsample,
    Case::Permute,
    Case::Concat,
    Case::Narrow,
    Case::IndexSelect,
    Case::BroadcastTo,
    Case::BilinearSample,
];

/// Values whose magnitude stays clear of the kinks at zero used by relu/abs/clamp.
fn away_from_zero(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.uniform_range(0.1, 1.5);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn normal(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape.to_vec(), 1.0)
}

impl Case {
    fn params(self, rng: &mut RngState) -> Vec<Tensor<f64>> {
        use Case::*;
        match self {
            AddBroadcast | SubBroadcast | MulBroadcast => vec![normal(rng, &[2, 3]), normal(rng, &[3])],
            Div => vec![normal(rng, &[2, 3]), normal(rng, &[2, 3])],
            Maximum | Minimum => {
                // operands separated by at least 0.1 so no tie sits within a step
                let a = normal(rng, &[6]);
                let d = away_from_zero(rng, &[6]);
                let b = Tensor::from_fn([6], |i| a.data()[i] + d.data()[i]);
                vec![a, b]
            }
            Relu | Abs => vec![away_from_zero(rng, &[7])],
            Clamp => vec![Tensor::from_fn([6], |i| [-1.3, -0.6, -0.2, 0.3, 0.7, 1.4][i] + 0.05 * rng.normal())],
            Exp | Ln | Sqrt | Tanh | Sigmoid | Gelu => vec![normal(rng, &[7])],
            SumAxes | MeanAxes | Softmax => vec![normal(rng, &[2, 3, 4])],
            MaxAxes => {
                // distinct values spaced well apart
                let mut v: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
                rng.shuffle(&mut v);
                vec![Tensor::new([2, 3, 4], v).unwrap()]
            }
            LayerNorm => vec![normal(rng, &[2, 5, 3]), normal(rng, &[5]), normal(rng, &[5])],
            MatmulBatched => vec![normal(rng, &[2, 3, 4]), normal(rng, &[1, 4, 2])],
            Linear => vec![normal(rng, &[2, 3, 4]), normal(rng, &[4, 5]), normal(rng, &[5])],
            Conv => vec![normal(rng, &[2, 5, 5]), normal(rng, &[3, 2, 3, 3]), normal(rng, &[3])],
            ConvStrided => vec![normal(rng, &[2, 6, 7]), normal(rng, &[2, 2, 2, 2]), normal(rng, &[2])],
            ConvDepthwiseDilated => vec![normal(rng, &[3, 7, 6]), normal(rng, &[3, 1, 3, 3]), normal(rng, &[3])],
            ConvGrouped => vec![normal(rng, &[4, 5, 5]), normal(rng, &[6, 2, 3, 3]), normal(rng, &[6])],
            ConvBatched => vec![normal(rng, &[2, 3, 4, 4]), normal(rng, &[2, 3, 1, 1]), normal(rng, &[2])],
            Upsample => vec![normal(rng, &[2, 2, 3])],
            Permute => vec![normal(rng, &[2, 3, 4])],
            Concat => vec![normal(rng, &[2, 3]), normal(rng, &[2, 2])],
            Narrow | IndexSelect => vec![normal(rng, &[4, 3])],
            BroadcastTo => vec![normal(rng, &[3, 1])],
            BilinearSample => {
                let (h, w) = (4, 5);
                let f = normal(rng, &[2, h, w]);
                // pixel fractions kept inside (0.1, 0.9) so no sample straddles a texel boundary
                let pts = Tensor::from_fn([5, 2], |i| {
                    let size = if i % 2 == 0 { w } else { h } as f64;
                    let px = rng.int_range(0, size as usize) as f64 - 1.0 + rng.uniform_range(0.1, 0.9);
                    (px + 0.5) / size
                });
                vec![f, pts]
            }
        }
    }

    fn forward<'t, T: Real>(self, p: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
        use Case::*;
        let pos = |v: Var<'t, T>| v.square()?.add_scalar(T::from_f64(0.5));
        Ok(match self {
            AddBroadcast => p[0].add(p[1])?,
            SubBroadcast => p[1].sub(p[0])?,
            MulBroadcast => p[0].mul(p[1])?,
            Div => p[0].div(pos(p[1])?)?,
            Maximum => p[0].maximum(p[1])?,
            Minimum => p[1].minimum(p[0])?,
            Exp => p[0].exp()?,
            Ln => pos(p[0])?.ln()?,
            Sqrt => pos(p[0])?.sqrt()?,
            Tanh => p[0].tanh()?,
            Sigmoid => p[0].sigmoid()?,
            Gelu => p[0].gelu()?,
            Relu => p[0].relu()?,
            Abs => p[0].abs()?,
            Clamp => p[0].clamp(T::from_f64(-1.0), T::from_f64(1.0))?,
            SumAxes => p[0].sum(&[0, 2], false)?,
            MeanAxes => p[0].mean(&[-1], true)?,
            MaxAxes => p[0].max(&[1], false)?,
            Softmax => p[0].softmax(1)?,
            LayerNorm => p[0].layer_norm(p[1], p[2], 1, 1e-6)?,
            MatmulBatched => p[0].matmul(p[1])?,
            Linear => p[0].linear(p[1], Some(p[2]))?,
            Conv => p[0].conv2d(p[1], Some(p[2]), Conv2dOptions::default().padding(1))?,
            ConvStrided => p[0].conv2d(p[1], Some(p[2]), Conv2dOptions::default().stride(2))?,
            ConvDepthwiseDilated => {
                p[0].conv2d(p[1], Some(p[2]), Conv2dOptions::default().groups(3).dilation(2).padding(2))?
            }
            ConvGrouped => p[0].conv2d(p[1], Some(p[2]), Conv2dOptions::default().groups(2).padding(1).stride(2))?,
            ConvBatched => p[0].conv2d(p[1], Some(p[2]), Conv2dOptions::default())?,
            Upsample => p[0].upsample_nearest2x(3, 6)?,
            Permute => p[0].permute(&[1, 2, 0])?,
            Concat => Var::concat(&[p[0], p[1], p[0]], 1)?,
            Narrow => p[0].narrow(0, 1, 2)?,
            IndexSelect => p[0].index_select(&[3, 0, 3, 1])?,
            BroadcastTo => p[0].broadcast_to([2, 3, 4])?,
            BilinearSample => p[0].bilinear_sample(p[1])?,
        })
    }
}

/// `sum(op(params) * W)` with a fixed, non-uniform weighting `W`.
struct Weighted(Case);

impl Objective for Weighted {
    type Error = TensorError;

    fn loss<'t, T: Real>(&self, tape: &'t Tape<T>, p: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
        let y = self.0.forward(p)?;
        let w = tape.constant(Tensor::from_fn(y.shape(), |i| T::from_f64(0.3 + ((i * 7) % 11) as f64 / 8.0)));
        y.mul(w)?.sum_all()
    }
}

fn check_case<T: Real>(case: Case, seed: u64, step: f64, tol: f64) -> Result<(), TestCaseError> {
    let mut rng = RngState::new(seed);
    let params = case.params(&mut rng);
    let opts = GradCheckOptions { step, tolerance: tol, seed, samples_per_param: 24 };
    let report = finite_diff_check::<T, _>(&Weighted(case), &params, &opts).unwrap();
    prop_assert!(report.passed(), "{case:?} {} seed {seed}: {report}\n{:?}", T::DTYPE, report.failures().collect::<Vec<_>>());
    Ok(())
}

fn config() -> Config {
    Config { cases: 3, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..Config::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn every_op_matches_finite_differences_in_f64(seed in any::<u64>()) {
        for &case in ALL {
            // a 1e-3 step leaves O(1e-7) truncation error, too coarse for 1e-5 on small gradients
            check_case::<f64>(case, seed, 1e-6, 1e-5)?;
        }
    }

    #[test]
    fn every_op_matches_finite_differences_in_f32(seed in any::<u64>()) {
        for &case in ALL {
            check_case::<f32>(case, seed, 1e-3, 1e-3)?;
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = RngState::new(seed);
        let x = normal(&mut rng, &[2, 4, 4]);
        let w = normal(&mut rng, &[3, 2, 3, 3]);
        let grads = |a: f64, b: f64| {
            let tape = Tape::<f64>::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            let y = xv.conv2d(wv, None, Conv2dOptions::default().padding(1)).unwrap();
            let l1 = y.gelu().unwrap().sum_all().unwrap();
            let l2 = y.square().unwrap().mean_all().unwrap().add(xv.sigmoid().unwrap().sum_all().unwrap()).unwrap();
            let loss = l1.mul_scalar(a).unwrap().add(l2.mul_scalar(b).unwrap()).unwrap();
            let mut g = tape.backward(loss).unwrap();
            (g.take(xv), g.take(wv))
        };
        let (x1, w1) = grads(1.0, 0.0);
        let (x2, w2) = grads(0.0, 1.0);
        let (xc, wc) = grads(alpha, beta);
        for (combined, (g1, g2)) in [(xc, (x1, x2)), (wc, (w1, w2))] {
            for ((c, a), b) in combined.data().iter().zip(g1.data()).zip(g2.data()) {
                prop_assert!((c - (alpha * a + beta * b)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let x: Tensor<f32> = rng.normal_tensor([3, 7, 2], 4.0);
        let tape = Tape::<f32>::new();
        let y = tape.constant(x).softmax(1).unwrap().value();
        for o in 0..3 {
            for i in 0..2 {
                let s: f32 = (0..7).map(|k| y.get(&[o, k, i])).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                prop_assert!((0..7).all(|k| y.get(&[o, k, i]) > 0.0 && y.get(&[o, k, i]) < 1.0));
            }
        }
    }

    #[test]
    fn identity_depthwise_kernel_is_exact(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut rng = RngState::new(seed);
        let x: Tensor<f32> = rng.normal_tensor([c, h, w], 1.0);
        let tape = Tape::<f32>::new();
        let mut k = Tensor::zeros([c, 1, 3, 3]);
        for ch in 0..c {
            k.data_mut()[ch * 9 + 4] = 1.0;
        }
        let y = tape.constant(x.clone()).conv2d(tape.constant(k), None, Conv2dOptions::default().groups(c).padding(1)).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }
}

#[test]
fn f32_and_f64_analytic_gradients_agree() {
    let mut rng = RngState::new(11);
    let params = Case::LayerNorm.params(&mut rng);
    let (v32, g32) = value_and_grad::<f32, _>(&Weighted(Case::LayerNorm), &params).unwrap();
    let (v64, g64) = value_and_grad::<f64, _>(&Weighted(Case::LayerNorm), &params).unwrap();
    assert!((v32 - v64).abs() < 1e-4);
    for (a, b) in g32.iter().zip(&g64) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-4);
    }
}
