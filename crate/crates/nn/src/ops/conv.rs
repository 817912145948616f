//! 2-D convolution via im2col + gemm.

use crate::float::{gemm, MatView};
use crate::{Array, Float, Var};

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.ho * self.wo
    }
    /// Samples processed per gemm so that small maps still give wide products.
    fn chunk(&self) -> usize {
        (2048usize.div_ceil(self.plane())).clamp(1, self.n)
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_range(g: &Geom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((g.w as isize - off + s - 1) / s).clamp(0, g.wo as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// Fills `cols` (rows x (count*plane)) for samples `[n0, n0+count)`.
fn im2col<T: Float>(x: &[T], g: &Geom, n0: usize, count: usize, cols: &mut [T]) {
    let plane = g.plane();
    let width = count * plane;
    let ranges: Vec<(usize, usize)> = (0..g.k).map(|kx| valid_range(g, kx)).collect();
    for s in 0..count {
        let xs = &x[(n0 + s) * g.ci * g.h * g.w..(n0 + s + 1) * g.ci * g.h * g.w];
        for c in 0..g.ci {
            let xc = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    let row = (c * g.k + ky) * g.k + kx;
                    let dst = &mut cols[row * width + s * plane..row * width + (s + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let start = (lo * g.stride + kx) - g.pad;
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[start + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `dx` for samples `[n0, n0+count)`.
fn col2im<T: Float>(cols: &[T], g: &Geom, n0: usize, count: usize, dx: &mut [T]) {
    let plane = g.plane();
    let width = count * plane;
    let ranges: Vec<(usize, usize)> = (0..g.k).map(|kx| valid_range(g, kx)).collect();
    for s in 0..count {
        let xs = &mut dx[(n0 + s) * g.ci * g.h * g.w..(n0 + s + 1) * g.ci * g.h * g.w];
        for c in 0..g.ci {
            let xc = &mut xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    let row = (c * g.k + ky) * g.k + kx;
                    let src = &cols[row * width + s * plane..row * width + (s + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            continue;
                        }
                        let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                        let start = (lo * g.stride + kx) - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in drow[start..start + (hi - lo)].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in srow.iter().enumerate() {
                                drow[start + j * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies sample-major `[count, c, plane]` into channel-major `[c, count*plane]`.
fn gather_channels<T: Float>(
    src: &[T],
    c: usize,
    plane: usize,
    n0: usize,
    count: usize,
    dst: &mut [T],
) {
    for s in 0..count {
        for ch in 0..c {
            let from = ((n0 + s) * c + ch) * plane;
            let to = ch * count * plane + s * plane;
            dst[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
}

fn scatter_channels<T: Float>(
    src: &[T],
    c: usize,
    plane: usize,
    n0: usize,
    count: usize,
    dst: &mut [T],
) {
    for s in 0..count {
        for ch in 0..c {
            let to = ((n0 + s) * c + ch) * plane;
            let from = ch * count * plane + s * plane;
            dst[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
}

fn conv_forward<T: Float>(x: &Array<T>, w: &Array<T>, g: &Geom) -> Array<T> {
    let mut out = Array::zeros([g.n, g.co, g.ho, g.wo]);
    let (rows, plane) = (g.rows(), g.plane());
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk * plane];
    let mut tmp = vec![T::zero(); g.co * chunk * plane];
    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let width = count * plane;
        if g.is_pointwise() {
            gather_channels(x.data(), g.ci, plane, n0, count, &mut cols);
        } else {
            im2col(x.data(), g, n0, count, &mut cols);
        }
        gemm(
            T::one(),
            MatView::row_major(w.data(), g.co, rows),
            MatView::row_major(&cols[..rows * width], rows, width),
            T::zero(),
            &mut tmp[..g.co * width],
        );
        scatter_channels(&tmp, g.co, plane, n0, count, out.data_mut());
        n0 += count;
    }
    out
}

fn conv_backward<T: Float>(
    x: &Array<T>,
    w: &Array<T>,
    grad: &Array<T>,
    g: &Geom,
    need_x: bool,
    need_w: bool,
) -> (Option<Array<T>>, Option<Array<T>>) {
    let (rows, plane) = (g.rows(), g.plane());
    let chunk = g.chunk();
    let mut dx = need_x.then(|| Array::zeros([g.n, g.ci, g.h, g.w]));
    let mut dw = need_w.then(|| Array::zeros(w.shape().to_vec()));
    let mut cols = vec![T::zero(); rows * chunk * plane];
    let mut gch = vec![T::zero(); g.co * chunk * plane];
    let mut n0 = 0;
    while n0 < g.n {
        let count = chunk.min(g.n - n0);
        let width = count * plane;
        gather_channels(grad.data(), g.co, plane, n0, count, &mut gch);
        let gmat = MatView::row_major(&gch[..g.co * width], g.co, width);
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gather_channels(x.data(), g.ci, plane, n0, count, &mut cols);
            } else {
                im2col(x.data(), g, n0, count, &mut cols);
            }
            gemm(
                T::one(),
                gmat,
                MatView::transposed(&cols[..rows * width], rows, width),
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatView::transposed(w.data(), g.co, rows),
                gmat,
                T::zero(),
                &mut cols[..rows * width],
            );
            if g.is_pointwise() {
                let d = dx.data_mut();
                for s in 0..count {
                    for ch in 0..g.ci {
                        let to = ((n0 + s) * g.ci + ch) * plane;
                        let from = ch * width + s * plane;
                        for i in 0..plane {
                            d[to + i] += cols[from + i];
                        }
                    }
                }
            } else {
                col2im(&cols[..rows * width], g, n0, count, dx.data_mut());
            }
        }
        n0 += count;
    }
    (dx, dw)
}

impl<T: Float> Var<T> {
    /// Zero-padded 2-D convolution of an NCHW input with a `[co, ci, k, k]` kernel.
    pub fn conv2d(&self, weight: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        self.conv2d_bias(weight, None, stride, pad)
    }

    /// [`Var::conv2d`] plus a per-output-channel bias `[co]`.
    pub fn conv2d_bias(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Var<T> {
        let (n, ci, h, w) = self.dims4();
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [co, ci, k, k]");
        assert_eq!(
            ws[1],
            ci,
            "conv input channels: weight {ws:?} vs input {:?}",
            self.shape()
        );
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(stride >= 1);
        let k = ws[2];
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "kernel larger than padded input"
        );
        let g = Geom {
            n,
            ci,
            h,
            w,
            co: ws[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let mut out = conv_forward(self.value(), weight.value(), &g);
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            assert_eq!(b.shape(), [g.co], "conv bias must be [co]");
            let plane = g.plane();
            let bd = b.value().data();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let v = bd[i % g.co];
                chunk.iter_mut().for_each(|x| *x += v);
            }
            inputs.push(b.clone());
        }
        Var::from_op(out, inputs, move |ctx| {
            let (dx, dw) = conv_backward(
                ctx.input(0),
                ctx.input(1),
                ctx.grad,
                &g,
                ctx.needs(0),
                ctx.needs(1),
            );
            let mut grads = vec![dx, dw];
            if ctx.inputs_len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = Array::zeros([g.co]);
                    let d = db.data_mut();
                    for (i, chunk) in ctx.grad.data().chunks(g.plane()).enumerate() {
                        d[i % g.co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    db
                }));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(x: &Array<f64>, w: &Array<f64>, stride: usize, pad: usize) -> Array<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array::zeros([n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.at4(b, c, iy as usize, ix as usize)
                                            * w.at4(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set4(b, o, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k, n, hw) in &[
            (1, 1, 3, 2, 5),
            (2, 1, 3, 3, 6),
            (1, 0, 1, 2, 4),
            (2, 0, 3, 40, 3),
            (1, 2, 5, 2, 7),
            (2, 1, 3, 1, 7),
            (2, 0, 3, 2, 8),
            (1, 0, 3, 1, 4),
        ] {
            let x = Array::<f64>::randn([n, 3, hw, hw], 1.0, &mut rng);
            let w = Array::<f64>::randn([4, 3, k, k], 1.0, &mut rng);
            let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), stride, pad);
            let r = naive(&x, &w, stride, pad);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.value().data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_is_adjoint_of_forward() {
        // <conv(x), g> == <x, dx> and == <w, dw> (bilinearity)
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for &(stride, pad, k) in &[
            (1usize, 1usize, 3usize),
            (2, 1, 3),
            (1, 0, 1),
            (1, 2, 5),
            (2, 0, 3),
        ] {
            let x = Var::leaf(Array::<f64>::randn([2, 3, 6, 6], 1.0, &mut rng), true);
            let w = Var::leaf(Array::<f64>::randn([5, 3, k, k], 1.0, &mut rng), true);
            let y = x.conv2d(&w, stride, pad);
            let gout = Array::<f64>::randn(y.shape().to_vec(), 1.0, &mut rng);
            let inner: f64 = y
                .value()
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, b)| a * b)
                .sum();
            let grads = y.backward_with(gout);
            let via_x: f64 = x
                .value()
                .data()
                .iter()
                .zip(grads.wrt(&x).unwrap().data())
                .map(|(a, b)| a * b)
                .sum();
            let via_w: f64 = w
                .value()
                .data()
                .iter()
                .zip(grads.wrt(&w).unwrap().data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((inner - via_x).abs() < 1e-9 * inner.abs().max(1.0));
            assert!((inner - via_w).abs() < 1e-9 * inner.abs().max(1.0));
        }
    }

    #[test]
    fn fused_bias_matches_broadcast_add() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Var::leaf(Array::<f64>::randn([2, 3, 5, 5], 1.0, &mut rng), true);
        let w = Var::leaf(Array::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng), true);
        let b = Var::leaf(Array::<f64>::randn([4], 1.0, &mut rng), true);
        let fused = x.conv2d_bias(&w, Some(&b), 1, 1);
        let split = x.conv2d(&w, 1, 1).add(&b.reshape([1, 4, 1, 1]));
        assert_eq!(fused.value(), split.value());
        let gf = fused.sqr().sum_all().backward();
        let gs = split.sqr().sum_all().backward();
        for v in [&x, &w, &b] {
            for (a, c) in gf
                .wrt(v)
                .unwrap()
                .data()
                .iter()
                .zip(gs.wrt(v).unwrap().data())
            {
                assert!((a - c).abs() < 1e-9);
            }
        }
    }
}
