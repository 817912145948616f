use crate::float::{gemm, MatView};
use crate::{Array, Float, Var};

impl<T: Float> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let shape = shape.into();
        let v = self.value().clone().reshape(shape);
        Var::from_op(v, vec![self.clone()], |ctx| {
            vec![Some(
                ctx.grad.clone().reshape(ctx.input(0).shape().to_vec()),
            )]
        })
    }

    /// `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        Var::from_op(
            Array::from_vec(out_shape, data),
            vec![self.clone()],
            move |ctx| {
                let mut g = Array::zeros(shape.clone());
                let gd = ctx.grad.data();
                let d = g.data_mut();
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            },
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), base.len(), "concat rank mismatch");
                for (d, (&a, &b)) in s.iter().zip(&base).enumerate() {
                    assert!(
                        d == axis || a == b,
                        "concat shape mismatch {s:?} vs {base:?}"
                    );
                }
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let src = &p.value().data()[o * l * inner..(o + 1) * l * inner];
                data.extend_from_slice(src);
            }
        }
        Var::from_op(
            Array::from_vec(out_shape, data),
            parts.to_vec(),
            move |ctx| {
                let gd = ctx.grad.data();
                let mut offset = 0;
                lens.iter()
                    .enumerate()
                    .map(|(pi, &l)| {
                        let start = offset;
                        offset += l;
                        if !ctx.needs(pi) {
                            return None;
                        }
                        let mut g = Array::zeros(ctx.input(pi).shape().to_vec());
                        let d = g.data_mut();
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            d[o * l * inner..(o + 1) * l * inner]
                                .copy_from_slice(&gd[src..src + l * inner]);
                        }
                        Some(g)
                    })
                    .collect()
            },
        )
    }

    /// Translates an NCHW map: `out[.., y, x] = in[.., y + dy, x + dx]`, zero
    /// where the source falls outside.
    pub fn shift2d(&self, dy: isize, dx: isize) -> Var<T> {
        let v = shift_nchw(self.value(), dy, dx);
        Var::from_op(v, vec![self.clone()], move |ctx| {
            vec![Some(shift_nchw(ctx.grad, -dy, -dx))]
        })
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.ndim() == 2 && b.ndim() == 2,
            "matmul needs rank-2 operands"
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dimension");
        let mut out = Array::zeros([m, n]);
        gemm(
            T::one(),
            MatView::row_major(a.data(), m, k),
            MatView::row_major(b.data(), k, n),
            T::zero(),
            out.data_mut(),
        );
        Var::from_op(out, vec![self.clone(), other.clone()], move |ctx| {
            let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
            let ga = ctx.needs(0).then(|| {
                let mut ga = Array::zeros([m, k]);
                gemm(
                    T::one(),
                    MatView::row_major(g.data(), m, n),
                    MatView::transposed(b.data(), k, n),
                    T::zero(),
                    ga.data_mut(),
                );
                ga
            });
            let gb = ctx.needs(1).then(|| {
                let mut gb = Array::zeros([k, n]);
                gemm(
                    T::one(),
                    MatView::transposed(a.data(), m, k),
                    MatView::row_major(g.data(), m, n),
                    T::zero(),
                    gb.data_mut(),
                );
                gb
            });
            vec![ga, gb]
        })
    }

    /// Transpose of a rank-2 value.
    pub fn t(&self) -> Var<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "t() needs rank 2");
        let v = transpose2(x);
        Var::from_op(v, vec![self.clone()], |ctx| {
            vec![Some(transpose2(ctx.grad))]
        })
    }
}

fn transpose2<T: Float>(x: &Array<T>) -> Array<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(xd[i * c + j]);
        }
    }
    Array::from_vec([c, r], data)
}

fn shift_nchw<T: Float>(x: &Array<T>, dy: isize, dx: isize) -> Array<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Array::zeros([n, c, h, w]);
    let (xd, od) = (x.data(), out.data_mut());
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                od[base + y * w + xx] = xd[base + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Var::leaf(Array::<f64>::from_vec([1, 2, 1, 1], vec![1., 2.]), true);
        let b = Var::leaf(Array::<f64>::from_vec([1, 1, 1, 1], vec![3.]), true);
        let c = Var::concat(&[a.clone(), b.clone()], 1);
        assert_eq!(c.value().data(), &[1., 2., 3.]);
        let tail = c.narrow(1, 1, 2);
        assert_eq!(tail.value().data(), &[2., 3.]);
        let g = tail.sum_all().backward();
        assert_eq!(g.wrt(&a).unwrap().data(), &[0., 1.]);
        assert_eq!(g.wrt(&b).unwrap().data(), &[1.]);
    }

    #[test]
    fn shift_moves_content() {
        let x = Var::constant(Array::<f32>::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]));
        assert_eq!(x.shift2d(0, 1).value().data(), &[2., 0., 4., 0.]);
        assert_eq!(x.shift2d(-1, 0).value().data(), &[0., 0., 1., 2.]);
    }

    #[test]
    fn matmul_matches_manual() {
        let a = Var::constant(Array::<f64>::from_vec([2, 2], vec![1., 2., 3., 4.]));
        let b = Var::constant(Array::<f64>::from_vec([2, 1], vec![5., 6.]));
        assert_eq!(a.matmul(&b).value().data(), &[17., 39.]);
        assert_eq!(a.t().value().data(), &[1., 3., 2., 4.]);
    }
}
