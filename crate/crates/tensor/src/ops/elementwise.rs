use std::rc::Rc;

use super::{broadcast_binary, reduce_to_shape};
use crate::error::Result;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        }
    }
}

fn gelu_value<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn sigmoid_value<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, rhs: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let out = match kind {
            Binary::Add => broadcast_binary(kind.name(), &a, &b, |x, y| x + y)?,
            Binary::Sub => broadcast_binary(kind.name(), &a, &b, |x, y| x - y)?,
            Binary::Mul => broadcast_binary(kind.name(), &a, &b, |x, y| x * y)?,
            Binary::Div => broadcast_binary(kind.name(), &a, &b, |x, y| x / y)?,
            Binary::Max => broadcast_binary(kind.name(), &a, &b, |x, y| if x >= y { x } else { y })?,
            Binary::Min => broadcast_binary(kind.name(), &a, &b, |x, y| if x <= y { x } else { y })?,
        };
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape().push(kind.name(), &[self, rhs], Rc::new(out), move |g| {
            let (ga, gb) = match kind {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.map(|v| -v)),
                Binary::Mul => (
                    broadcast_binary("mul", g, &b, |gv, y| gv * y).expect("mul grad"),
                    broadcast_binary("mul", g, &a, |gv, x| gv * x).expect("mul grad"),
                ),
                Binary::Div => {
                    let ga = broadcast_binary("div", g, &b, |gv, y| gv / y).expect("div grad");
                    let ab = broadcast_binary("div", &a, &b, |x, y| x / (y * y)).expect("div grad");
                    let gb = broadcast_binary("div", g, &ab, |gv, q| -gv * q).expect("div grad");
                    (ga, gb)
                }
                Binary::Max | Binary::Min => {
                    let max = matches!(kind, Binary::Max);
                    // 1 where lhs wins; ties go to lhs
                    let mask = broadcast_binary("select", &a, &b, |x, y| {
                        let lhs = if max { x >= y } else { x <= y };
                        if lhs {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .expect("select grad");
                    let ga = broadcast_binary("select", g, &mask, |gv, m| gv * m).expect("select grad");
                    let gb = broadcast_binary("select", g, &mask, |gv, m| gv * (T::one() - m)).expect("select grad");
                    (ga, gb)
                }
            };
            vec![Some(reduce_to_shape(&ga, &a_shape)), Some(reduce_to_shape(&gb, &b_shape))]
        })
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise maximum; on ties the gradient flows to `self`.
    pub fn maximum(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Max)
    }

    /// Elementwise minimum; on ties the gradient flows to `self`.
    pub fn minimum(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Binary::Min)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v + c);
        self.tape().push("add_scalar", &[self], Rc::new(out), |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * c);
        self.tape().push("mul_scalar", &[self], Rc::new(out), move |g| vec![Some(g.scale(c))])
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.mul_scalar(-T::one())
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.neg()?.add_scalar(c)
    }

    /// Elementwise op with a caller-supplied derivative `df(x)`.
    pub fn map_elementwise(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(f);
        self.tape().push(op, &[self], Rc::new(out), move |g| {
            let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * df(xv)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("map grad"))]
        })
    }

    /// Elementwise op whose derivative is expressed through the output `y`.
    fn map_with_output(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        dy: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let out = Rc::new(self.value().map(f));
        let y = Rc::clone(&out);
        self.tape().push(op, &[self], out, move |g| {
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * dy(yv)).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("map grad"))]
        })
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.map_with_output("exp", |v| v.exp(), |y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.map_elementwise("ln", |v| v.ln(), |x| T::one() / x)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.map_with_output("sqrt", |v| v.sqrt(), |y| T::from_f64(0.5) / y)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.map_elementwise("square", |v| v * v, |x| x + x)
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.map_elementwise("abs", |v| v.abs(), |x| if x >= T::zero() { T::one() } else { -T::one() })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.map_elementwise(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Gaussian-CDF GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.map_elementwise("gelu", gelu_value, gelu_grad)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.map_with_output("sigmoid", sigmoid_value, |y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.map_with_output("tanh", |v| v.tanh(), |y| T::one() - y * y)
    }

    /// `max(self, lo)`; zero gradient where clamped.
    pub fn clamp_min(self, lo: T) -> Result<Var<'t, T>> {
        self.map_elementwise(
            "clamp_min",
            move |v| if v < lo { lo } else { v },
            move |x| if x < lo { T::zero() } else { T::one() },
        )
    }

    pub fn clamp(self, lo: T, hi: T) -> Result<Var<'t, T>> {
        self.map_elementwise(
            "clamp",
            move |v| v.max(lo).min(hi),
            move |x| if x < lo || x > hi { T::zero() } else { T::one() },
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn gelu_and_sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.gelu().unwrap().item(), 0.0);
        assert_eq!(x.sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // x * Phi(x) from tables of the standard normal CDF
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3], vec![1.0, -1.0, 2.0]).unwrap());
        let y = x.gelu().unwrap().value();
        let want = [0.841_344_746_068_542_9, -0.158_655_253_931_457_05, 1.954_499_736_103_642];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Tensor::new([3], vec![10., 20., 30.]).unwrap());
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let loss = y.sum_all().unwrap();
        let mut g = tape.backward(loss).unwrap();
        assert_eq!(g.take(b).data(), &[2., 2., 2.]);
        assert_eq!(g.take(x).data(), &[1.; 6]);
    }

    #[test]
    fn mismatched_broadcast_is_an_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }
}
