//! Pointwise arithmetic, broadcasting and reductions.

use std::rc::Rc;

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{strides_of, Tensor};

/// Calls `f(out_index, b_index)` for every element of `out_shape`, where `b_shape` is
/// broadcast against it (right aligned; each `b` dim is 1 or equal).
fn for_each_bcast(out_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    assert!(b_shape.len() <= out_shape.len(), "cannot broadcast {b_shape:?} to {out_shape:?}");
    let off = out_shape.len() - b_shape.len();
    let b_str = strides_of(b_shape);
    let mut bs = vec![0usize; out_shape.len()];
    for (i, (&d, &s)) in b_shape.iter().zip(&b_str).enumerate() {
        let od = out_shape[off + i];
        assert!(d == od || d == 1, "cannot broadcast {b_shape:?} to {out_shape:?}");
        bs[off + i] = if d == 1 { 0 } else { s };
    }
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_s = bs[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut o = 0usize;
    while o < n {
        let mut bi = base;
        for _ in 0..inner {
            f(o, bi);
            o += 1;
            bi += inner_s;
        }
        // advance the outer odometer
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += bs[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= bs[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn unary<'t, T: Real>(
    x: &Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    // df(x, y) is the derivative given input x and output y
    let out = x.value.map(f);
    let xv = x.value_rc();
    let yv = Rc::new(out.clone());
    x.tape.op(out, &[x], move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_vec(g.shape(), data))]
    })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let out = self.value.zip_map(&other.value, |a, b| a + b);
        self.tape.op(out, &[self, other], |g, n| {
            vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let out = self.value.zip_map(&other.value, |a, b| a - b);
        self.tape.op(out, &[self, other], |g, n| {
            vec![n[0].then(|| g.clone()), n[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let out = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape.op(out, &[self, other], move |g, n| {
            vec![
                n[0].then(|| g.zip_map(&b, |g, b| g * b)),
                n[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        })
    }

    pub fn div(&self, other: &Var<'t, T>) -> Var<'t, T> {
        let out = self.value.zip_map(&other.value, |a, b| a / b);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape.op(out, &[self, other], move |g, n| {
            vec![
                n[0].then(|| g.zip_map(&b, |g, b| g / b)),
                n[1].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect();
                    Tensor::from_vec(g.shape(), data)
                }),
            ]
        })
    }

    /// `self + b` with `b` broadcast to `self`'s shape.
    pub fn add_bcast(&self, b: &Var<'t, T>) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let b_shape = b.shape().to_vec();
        let mut out = (*self.value).clone();
        {
            let od = out.data_mut();
            let bd = b.value.data();
            for_each_bcast(&shape, &b_shape, |o, i| od[o] = od[o] + bd[i]);
        }
        self.tape.op(out, &[self, b], move |g, n| {
            let gb = n[1].then(|| {
                let mut gb = Tensor::zeros(&b_shape);
                let gd = g.data();
                let bd = gb.data_mut();
                for_each_bcast(&shape, &b_shape, |o, i| bd[i] = bd[i] + gd[o]);
                gb
            });
            vec![n[0].then(|| g.clone()), gb]
        })
    }

    /// `self * b` with `b` broadcast to `self`'s shape.
    pub fn mul_bcast(&self, b: &Var<'t, T>) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let b_shape = b.shape().to_vec();
        let mut out = (*self.value).clone();
        {
            let od = out.data_mut();
            let bd = b.value.data();
            for_each_bcast(&shape, &b_shape, |o, i| od[o] = od[o] * bd[i]);
        }
        let (xv, bv) = (self.value_rc(), b.value_rc());
        self.tape.op(out, &[self, b], move |g, n| {
            let gd = g.data();
            let gx = n[0].then(|| {
                let mut gx = g.clone();
                let xd = gx.data_mut();
                let bd = bv.data();
                for_each_bcast(&shape, &b_shape, |o, i| xd[o] = gd[o] * bd[i]);
                gx
            });
            let gb = n[1].then(|| {
                let mut gb = Tensor::zeros(&b_shape);
                let acc = gb.data_mut();
                let xd = xv.data();
                for_each_bcast(&shape, &b_shape, |o, i| acc[i] = acc[i] + gd[o] * xd[o]);
                gb
            });
            vec![gx, gb]
        })
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let out = self.value.map(|v| v * c);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value.map(|v| v + c);
        self.tape.op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'t, T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        unary(self, |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn abs(&self) -> Var<'t, T> {
        unary(
            self,
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

    pub fn ln(&self) -> Var<'t, T> {
        unary(self, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn exp(&self) -> Var<'t, T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn relu(&self) -> Var<'t, T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Exact (erf based) GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
        unary(
            self,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value.numel().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Mean over the last axis: `[.., L] -> [..]`.
    pub fn mean_last(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let l = *shape.last().expect("mean_last on a 0-d tensor");
        let out_shape = &shape[..shape.len() - 1];
        let inv = T::one() / T::from_usize(l).unwrap();
        let data: Vec<T> = self
            .value
            .data()
            .chunks(l.max(1))
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(out_shape, data);
        self.tape.op(out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(shape.iter().product());
            for &v in g.data() {
                gx.extend(std::iter::repeat_n(v * inv, l));
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn bcast_visits_expected_pairs() {
        let mut pairs = Vec::new();
        for_each_bcast(&[2, 3], &[3], |o, b| pairs.push((o, b)));
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);
        pairs.clear();
        for_each_bcast(&[2, 2, 2], &[2, 1, 2], |o, b| pairs.push((o, b)));
        assert_eq!(pairs.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    #[test]
    fn add_bcast_reduces_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[4, 3]));
        let b = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let y = x.add_bcast(&b).sum();
        assert_eq!(y.value().item(), 24.0);
        let g = tape.backward(&y);
        assert_eq!(g.get(&b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }
}
