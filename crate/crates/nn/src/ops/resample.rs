use crate::{Array, Float, Var};

/// Source taps for 2x bilinear upsampling with half-pixel centers, edges clamped.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                (i.saturating_sub(1), i, 0.25, 0.75)
            } else {
                (i, (i + 1).min(n - 1), 0.75, 0.25)
            }
        })
        .collect()
}

impl<T: Float> Var<T> {
    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let x = self.value().data();
        let mut out = Array::zeros([n, c, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        od[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |ctx| {
            let gd = ctx.grad.data();
            let mut g = Array::zeros([n, c, h, w]);
            let d = g.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Bilinear 2x upsampling (half-pixel centers, clamped borders).
    pub fn upsample_bilinear2(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let x = self.value().data();
        let mut out = Array::zeros([n, c, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            for p in 0..n * c {
                let src = &x[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = T::of(wy0 * wx0) * src[y0 * w + x0]
                            + T::of(wy0 * wx1) * src[y0 * w + x1]
                            + T::of(wy1 * wx0) * src[y1 * w + x0]
                            + T::of(wy1 * wx1) * src[y1 * w + x1];
                        od[(p * 2 * h + oy) * 2 * w + ox] = v;
                    }
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |ctx| {
            let gd = ctx.grad.data();
            let mut g = Array::zeros([n, c, h, w]);
            let d = g.data_mut();
            for p in 0..n * c {
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = gd[(p * 2 * h + oy) * 2 * w + ox];
                        dst[y0 * w + x0] += T::of(wy0 * wx0) * gv;
                        dst[y0 * w + x1] += T::of(wy0 * wx1) * gv;
                        dst[y1 * w + x0] += T::of(wy1 * wx0) * gv;
                        dst[y1 * w + x1] += T::of(wy1 * wx1) * gv;
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// 2x2 average pooling with stride 2 (even sizes only).
    pub fn avg_pool2(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even spatial size, got {h}x{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value().data();
        let quarter = T::of(0.25);
        let mut out = Array::zeros([n, c, ho, wo]);
        {
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let b = p * h * w;
                        od[(p * ho + y) * wo + xx] = quarter
                            * (x[b + 2 * y * w + 2 * xx]
                                + x[b + 2 * y * w + 2 * xx + 1]
                                + x[b + (2 * y + 1) * w + 2 * xx]
                                + x[b + (2 * y + 1) * w + 2 * xx + 1]);
                    }
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |ctx| {
            let gd = ctx.grad.data();
            let mut g = Array::zeros([n, c, h, w]);
            let d = g.data_mut();
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        d[(p * h + y) * w + xx] = quarter * gd[(p * ho + y / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        self.reshape([n, c, h * w]).mean_axis(2).reshape([n, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_constants_and_ramps() {
        let x = Var::constant(Array::<f64>::full([1, 1, 3, 3], 0.7));
        assert!(x
            .upsample_bilinear2()
            .value()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
        let ramp = Var::constant(Array::<f64>::from_vec([1, 1, 1, 3], vec![0., 1., 2.]));
        let up = ramp.upsample_bilinear2();
        assert_eq!(up.shape(), &[1, 1, 2, 6]);
        assert_eq!(&up.value().data()[..6], &[0.0, 0.25, 0.75, 1.25, 1.75, 2.0]);
    }

    #[test]
    fn pool_then_nearest_preserves_mean() {
        let x = Var::constant(Array::<f64>::from_vec([1, 1, 2, 2], vec![1., 2., 3., 6.]));
        assert_eq!(x.avg_pool2().value().data(), &[3.0]);
        assert_eq!(x.avg_pool2().upsample_nearest2().value().data(), &[3.0; 4]);
    }
}
