use crate::{Array, Float, Var};

/// `(outer, axis_len, inner)` factorization of a shape around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn keep_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

impl<T: Float> Var<T> {
    pub fn sum_all(&self) -> Var<T> {
        let v = Array::scalar(self.value().sum());
        Var::from_op(v, vec![self.clone()], |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Array::full(ctx.input(0).shape().to_vec(), g))]
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Var<T> {
        let x = self.value();
        let (outer, len, inner) = split(x.shape(), axis);
        let mut out = Array::zeros(keep_shape(x.shape(), axis));
        {
            let (xd, od) = (x.data(), out.data_mut());
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        od[o * inner + i] += xd[base + i];
                    }
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |ctx| {
            let shape = ctx.input(0).shape().to_vec();
            let gd = ctx.grad.data();
            let mut g = Array::zeros(shape);
            let d = g.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(g)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<T> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Maximum over one axis (kept with length 1). The gradient goes to the
    /// first maximizing element.
    pub fn max_axis(&self, axis: usize) -> Var<T> {
        self.extreme_axis(axis, true)
    }

    /// Minimum over one axis (kept with length 1).
    pub fn min_axis(&self, axis: usize) -> Var<T> {
        self.extreme_axis(axis, false)
    }

    fn extreme_axis(&self, axis: usize, take_max: bool) -> Var<T> {
        let x = self.value();
        let (outer, len, inner) = split(x.shape(), axis);
        assert!(len > 0, "reduction over empty axis");
        let mut out = Array::zeros(keep_shape(x.shape(), axis));
        let mut arg = vec![0usize; outer * inner];
        {
            let (xd, od) = (x.data(), out.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = xd[o * len * inner + i];
                    let mut bk = 0;
                    for k in 1..len {
                        let v = xd[(o * len + k) * inner + i];
                        if (take_max && v > best) || (!take_max && v < best) {
                            best = v;
                            bk = k;
                        }
                    }
                    od[o * inner + i] = best;
                    arg[o * inner + i] = bk;
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |ctx| {
            let mut g = Array::zeros(ctx.input(0).shape().to_vec());
            let gd = ctx.grad.data();
            let d = g.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let k = arg[o * inner + i];
                    d[(o * len + k) * inner + i] += gd[o * inner + i];
                }
            }
            vec![Some(g)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_max_over_axis() {
        let x = Var::leaf(
            Array::<f64>::from_vec([2, 3], vec![1., 5., 3., 4., 2., 6.]),
            true,
        );
        assert_eq!(x.sum_axis(1).value().data(), &[9., 12.]);
        assert_eq!(x.sum_axis(0).value().data(), &[5., 7., 9.]);
        let m = x.max_axis(1);
        assert_eq!(m.value().data(), &[5., 6.]);
        let g = m.sum_all().backward();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0., 1., 0., 0., 0., 1.]);
        assert_eq!(x.min_axis(1).value().data(), &[1., 2.]);
    }
}
