//! Parameter registry, forward context and the small layers everything else is built from.
//!
//! Model structs hold [`ParamId`]s only. Values live in a [`ParamStore`] (always `f32`, the
//! checkpoint precision) and are bound onto a tape at the start of every forward pass, which
//! lets the same model run in `f32` for training and `f64` for gradient audits.

use std::cell::RefCell;

use scb_tensor::{Conv2dOptions, Real, RngState, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<f32>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, checking names and shapes against `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            let missing = self.names.iter().find(|n| !other.names.contains(n));
            let extra = other.names.iter().find(|n| !self.names.contains(n));
            return Err(Error::Validation(format!(
                "parameter set mismatch (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&mut self.values).zip(&other.values) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given std, redrawn beyond two standard deviations.
    TruncNormal(f64),
    /// Uniform in `±sqrt(6/(fan_in+fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    Values(Vec<f32>),
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RngState,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut RngState) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn tensor(&mut self, name: &str, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::TruncNormal(std) => (0..n).map(|_| self.rng.truncated_normal(std) as f32).collect(),
            Init::XavierUniform { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.uniform_range(-a, a) as f32).collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "initial values for {name}");
                v
            }
        };
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, Tensor::new(shape, data).expect("parameter shape"))
    }
}

/// Per-forward state: the tape, the bound parameters and the train/eval switch.
pub struct Ctx<'t, T: Real> {
    pub tape: &'t Tape<T>,
    params: Vec<Var<'t, T>>,
    pub training: bool,
    rng: RefCell<RngState>,
}

impl<'t, T: Real> Ctx<'t, T> {
    /// Binds every stored parameter as a leaf; `requires_grad` selects params vs constants.
    pub fn bind(tape: &'t Tape<T>, store: &ParamStore, requires_grad: bool) -> Self {
        let params = store.values().iter().map(|v| tape.leaf(v.cast(), requires_grad)).collect();
        Ctx { tape, params, training: false, rng: RefCell::new(RngState::new(0)) }
    }

    /// Uses already-recorded variables, one per parameter in registry order.
    pub fn from_vars(tape: &'t Tape<T>, params: Vec<Var<'t, T>>) -> Self {
        Ctx { tape, params, training: false, rng: RefCell::new(RngState::new(0)) }
    }

    pub fn with_training(mut self, training: bool, rng: RngState) -> Self {
        self.training = training;
        self.rng = RefCell::new(rng);
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var<'t, T>] {
        &self.params
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    pub fn bernoulli(&self, p: f64) -> bool {
        self.rng.borrow_mut().bernoulli(p)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize) -> Self {
        Self::with_init(pb, d_in, d_out, Init::TruncNormal(0.02), Init::Zeros)
    }

    pub fn with_init(pb: &mut ParamBuilder, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Self {
        Linear {
            weight: pb.tensor("weight", [d_in, d_out], weight),
            bias: Some(pb.tensor("bias", [d_out], bias)),
            d_in,
            d_out,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))?)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + self.bias.map_or(0, |_| self.d_out)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, k: usize, opts: Conv2dOptions) -> Self {
        let weight = pb.tensor("weight", [c_out, c_in / opts.groups, k, k], Init::TruncNormal(0.02));
        let bias = Some(pb.tensor("bias", [c_out], Init::Zeros));
        Conv2d { weight, bias, opts }
    }

    /// `k x k` convolution with "same" padding at stride 1.
    pub fn same(pb: &mut ParamBuilder, c_in: usize, c_out: usize, k: usize) -> Self {
        Self::new(pb, c_in, c_out, k, Conv2dOptions::default().padding(k / 2))
    }

    /// Depthwise `k x k` with "same" padding.
    pub fn depthwise(pb: &mut ParamBuilder, c: usize, k: usize, dilation: usize) -> Self {
        let opts = Conv2dOptions::default().groups(c).dilation(dilation).padding(dilation * (k - 1) / 2);
        Self::new(pb, c, c, k, opts)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.opts)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, c: usize) -> Self {
        LayerNorm { gamma: pb.tensor("weight", [c], Init::Ones), beta: pb.tensor("bias", [c], Init::Zeros), eps: 1e-6 }
    }

    /// Normalises over `axis` (0 for `[C,H,W]` maps, -1 for `[N,D]` tokens).
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, axis: isize) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), axis, self.eps)?)
    }
}

/// Two-layer feed-forward block `d -> hidden -> d` with ReLU.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(pb: &mut ParamBuilder, d: usize, hidden: usize) -> Self {
        Ffn { fc1: Linear::new(&mut pb.scope("fc1"), d, hidden), fc2: Linear::new(&mut pb.scope("fc2"), hidden, d) }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(ctx, x)?.relu()?;
        self.fc2.forward(ctx, h)
    }
}

/// Zeroes a parameter in place (used to build identity-collapse configurations).
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}
