use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::broadcast::{binary_grad, binary_map};
use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        op: &str,
        f: fn(T, T) -> T,
        da: fn(T, T, T) -> T,
        db: fn(T, T, T) -> T,
    ) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = binary_map(&a, &b, f).unwrap_or_else(|| {
            panic!("{op}: cannot broadcast {:?} with {:?}", a.shape(), b.shape())
        });
        self.graph.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| binary_grad(g, &a, &b, a.shape(), da)),
                needs[1].then(|| binary_grad(g, &a, &b, b.shape(), db)),
            ]
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "add", |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "sub", |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, "mul", |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    /// Elementwise map whose derivative is expressed through input `x` and output `y`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        self.graph.record(y.clone(), &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|v| -v, |_, _| -T::one())
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(T::exp, |_, y| y)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(T::ln, |x, _| x.recip())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(T::sqrt, |_, y| T::lit(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(T::tanh, |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |v| if v < T::zero() { T::zero() } else { v },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::lit(slope);
        self.unary(
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }
}

macro_rules! impl_op {
    ($trait:ident, $method:ident) => {
        impl<'g, T: Scalar> $trait for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $method(self, rhs: Var<'g, T>) -> Var<'g, T> {
                Var::$method(self, rhs)
            }
        }
    };
}

impl_op!(Add, add);
impl_op!(Sub, sub);
impl_op!(Mul, mul);
impl_op!(Div, div);

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Var<'g, T> {
        Var::neg(self)
    }
}
