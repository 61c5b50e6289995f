use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, Axis, Zip};

use crate::{Elem, Var};

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<T: Elem>(g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g;
    }
    let mut out = g;
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl<T: Elem> Var<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let out = self.value().mapv(f);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps, y| {
                let mut gx = ArrayD::zeros(g.raw_dim());
                Zip::from(&mut gx)
                    .and(g)
                    .and(ps[0].value())
                    .and(y)
                    .for_each(|o, &g, &x, &y| *o = g * df(x, y));
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = self.value() + other.value();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, _| {
                vec![
                    ps[0].requires_grad().then(|| reduce_to_shape(g.clone(), ps[0].shape())),
                    ps[1].requires_grad().then(|| reduce_to_shape(g.clone(), ps[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let out = self.value() - other.value();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, _| {
                vec![
                    ps[0].requires_grad().then(|| reduce_to_shape(g.clone(), ps[0].shape())),
                    ps[1].requires_grad().then(|| reduce_to_shape(g.mapv(|v| -v), ps[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let out = self.value() * other.value();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, _| {
                let (a, b) = (&ps[0], &ps[1]);
                vec![
                    a.requires_grad().then(|| reduce_to_shape(g * b.value(), a.shape())),
                    b.requires_grad().then(|| reduce_to_shape(g * a.value(), b.shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let out = self.value() / other.value();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, y| {
                let (a, b) = (&ps[0], &ps[1]);
                vec![
                    a.requires_grad().then(|| reduce_to_shape(g / b.value(), a.shape())),
                    b.requires_grad().then(|| {
                        let gb = &(g * y) / b.value();
                        reduce_to_shape(gb.mapv(|v| -v), b.shape())
                    }),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Var<T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    /// `s - x`
    pub fn rsub_scalar(&self, s: T) -> Var<T> {
        self.unary(move |x| s - x, |_, _| -T::one())
    }

    pub fn powf(&self, p: T) -> Var<T> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn square(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}

macro_rules! bin_op {
    ($tr:ident, $m:ident) => {
        impl<T: Elem> $tr<&Var<T>> for &Var<T> {
            type Output = Var<T>;
            fn $m(self, rhs: &Var<T>) -> Var<T> {
                Var::$m(self, rhs)
            }
        }
    };
}

bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl<T: Elem> Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, IxDyn};

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = Var::<f64>::leaf(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let b = Var::<f64>::leaf(arr1(&[10.0, 20.0, 30.0]).into_dyn());
        let y = a.add(&b).sum();
        let g = y.backward();
        assert_eq!(g.get(&b).unwrap().as_slice().unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(&a).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn div_gradient() {
        let a = Var::<f64>::leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let b = Var::<f64>::leaf(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let g = a.div(&b).sum().backward();
        assert!((g.get(&a).unwrap()[[0]] - 0.5).abs() < 1e-12);
        assert!((g.get(&b).unwrap()[[0]] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn constants_carry_no_history() {
        let a = Var::<f32>::constant(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let y = a.exp().mul_scalar(2.0);
        assert!(!y.requires_grad());
        assert_eq!(y.backward().num_params(), 0);
    }
}
