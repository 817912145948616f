use crate::{Array, Float, Var};

/// Numpy-style broadcast of two shapes (shorter shape left-padded with 1s).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (a, b) = (pad(a), pad(b));
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "cannot broadcast {a:?} with {b:?}"
            );
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` inside the broadcast `out` shape (0 for broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let inner = out[last];
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, oa + j * sa[last], ob + j * sb[last]);
        }
        o += inner;
        // advance the odometer over all but the innermost axis
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<T: Float> Var<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        // derivative given (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let value = self.value().map(f);
        Var::from_op(value, vec![self.clone()], move |ctx| {
            let x = ctx.input(0).data();
            let y = ctx.output.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * df(x[i], y[i]))
                .collect();
            vec![Some(Array::from_vec(ctx.grad.shape().to_vec(), data))]
        })
    }

    fn binary(
        &self,
        other: &Var<T>,
        f: impl Fn(T, T) -> T,
        // partial derivatives given (a, b, out)
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<T> {
        let (a, b) = (self.value(), other.value());
        let value = if a.shape() == b.shape() {
            a.zip_map(b, &f)
        } else {
            let out = broadcast_shape(a.shape(), b.shape());
            let (sa, sb) = (
                bcast_strides(a.shape(), &out),
                bcast_strides(b.shape(), &out),
            );
            let mut res = Array::zeros(out.clone());
            let (ad, bd) = (a.data(), b.data());
            let rd = res.data_mut();
            for_each_bcast(&out, &sa, &sb, |o, ia, ib| rd[o] = f(ad[ia], bd[ib]));
            res
        };
        Var::from_op(value, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b, y, g) = (ctx.input(0), ctx.input(1), ctx.output, ctx.grad);
            let out = y.shape();
            let (sa, sb) = (bcast_strides(a.shape(), out), bcast_strides(b.shape(), out));
            let (ad, bd, yd, gd) = (a.data(), b.data(), y.data(), g.data());
            let mut ga = ctx.needs(0).then(|| Array::zeros(a.shape().to_vec()));
            let mut gb = ctx.needs(1).then(|| Array::zeros(b.shape().to_vec()));
            {
                let mut ga_d = ga.as_mut().map(|x| x.data_mut());
                let mut gb_d = gb.as_mut().map(|x| x.data_mut());
                for_each_bcast(out, &sa, &sb, |o, ia, ib| {
                    if let Some(d) = ga_d.as_deref_mut() {
                        d[ia] += gd[o] * da(ad[ia], bd[ib], yd[o]);
                    }
                    if let Some(d) = gb_d.as_deref_mut() {
                        d[ib] += gd[o] * db(ad[ia], bd[ib], yd[o]);
                    }
                });
            }
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        self.binary(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.binary(
            other,
            |a, b| a / b,
            |_, b, _| T::one() / b,
            |a, b, _| -a / (b * b),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var<T>) -> Var<T> {
        self.binary(
            other,
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { T::one() } else { T::zero() },
            |a, b, _| if a >= b { T::zero() } else { T::one() },
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn sqr(&self) -> Var<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn powf(&self, p: f64) -> Var<T> {
        let pt = T::of(p);
        self.unary(move |x| x.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
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

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::of(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Clips into `[lo, hi]`; the gradient is zero where clipping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

pub fn softplus<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_and_reduce_grad() {
        let a = Var::leaf(
            Array::<f64>::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]),
            true,
        );
        let b = Var::leaf(Array::<f64>::from_vec([1, 3], vec![10., 20., 30.]), true);
        let y = a.mul(&b).sum_all();
        assert_eq!(y.item(), 10. + 40. + 90. + 40. + 100. + 180.);
        let g = y.backward();
        assert_eq!(g.wrt(&b).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(g.wrt(&a).unwrap().data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn rank_padding_broadcast() {
        let a = Var::constant(Array::<f32>::from_vec([2, 2], vec![1., 2., 3., 4.]));
        let s = Var::constant(Array::<f32>::scalar(2.0));
        assert_eq!(a.mul(&s).value().data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0f64).is_finite());
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
