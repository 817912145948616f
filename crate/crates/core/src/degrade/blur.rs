use ugp_nn::Array;

use crate::data::ImageTensor;
use crate::degrade::BlurKernel;
use crate::error::{invalid, shape_err, Result};

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-channel 2-D convolution of a `[c, h, w]` array with reflect padding.
pub fn blur_array(x: &Array<f32>, kernel: &BlurKernel) -> Result<Array<f32>> {
    if x.ndim() != 3 {
        return Err(shape_err!("expected [c, h, w], got {:?}", x.shape()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = kernel.size();
    if s > h || s > w {
        return Err(invalid!("{s}x{s} kernel is larger than the {h}x{w} image"));
    }
    let r = (s / 2) as isize;
    // out(y, x) = sum_{i,j} k(i, j) in(y - (i - r), x - (j - r))
    let rows: Vec<Vec<usize>> = (0..h as isize)
        .map(|y| (0..s as isize).map(|i| reflect(y - (i - r), h)).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..w as isize)
        .map(|xx| (0..s as isize).map(|j| reflect(xx - (j - r), w)).collect())
        .collect();
    let kw = kernel.weights();
    let src = x.data();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0f64;
                for (i, &sy) in rows[y].iter().enumerate() {
                    let row = &plane[sy * w..(sy + 1) * w];
                    let krow = &kw[i * s..(i + 1) * s];
                    for (j, &sx) in cols[xx].iter().enumerate() {
                        acc += krow[j] * row[sx] as f64;
                    }
                }
                out[(ch * h + y) * w + xx] = acc as f32;
            }
        }
    }
    Ok(Array::from_vec([c, h, w], out))
}

pub fn apply_blur(img: &ImageTensor, kernel: &BlurKernel) -> Result<ImageTensor> {
    ImageTensor::from_clipped(blur_array(img.pixels(), kernel)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(size: usize, rng: &mut impl Rng) -> BlurKernel {
        let w: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>()).collect();
        BlurKernel::from_weights(size, w).unwrap()
    }

    fn numpy_reflect_pad(x: &[f32], h: usize, w: usize, p: usize) -> (Vec<f32>, usize, usize) {
        // explicit mirrored copy, built row by row
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mirror = |i: isize, n: isize| -> usize {
            let mut i = i;
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        };
        let mut out = vec![0f32; ph * pw];
        for y in 0..ph {
            for xx in 0..pw {
                let sy = mirror(y as isize - p as isize, h as isize);
                let sx = mirror(xx as isize - p as isize, w as isize);
                out[y * pw + xx] = x[sy * w + sx];
            }
        }
        (out, ph, pw)
    }

    #[test]
    fn matches_nested_loop_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let k = random_kernel(5, &mut rng);
            let x = Array::<f32>::uniform([3, 16, 16], 0.0, 1.0, &mut rng);
            let got = blur_array(&x, &k).unwrap();
            for c in 0..3 {
                let (pad, _, pw) = numpy_reflect_pad(&x.data()[c * 256..(c + 1) * 256], 16, 16, 2);
                for y in 0..16 {
                    for xx in 0..16 {
                        let mut acc = 0f64;
                        for i in 0..5 {
                            for j in 0..5 {
                                // flipped kernel over the padded window
                                acc += k.weights()[(4 - i) * 5 + (4 - j)]
                                    * pad[(y + i) * pw + xx + j] as f64;
                            }
                        }
                        let g = got.data()[(c * 16 + y) * 16 + xx] as f64;
                        assert!((g - acc).abs() <= 1e-6, "{g} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn delta_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = vec![0.0; 25];
        d[12] = 1.0;
        let delta = BlurKernel::from_weights(5, d).unwrap();
        let img = ImageTensor::new(Array::uniform([3, 9, 9], 0.0, 1.0, &mut rng)).unwrap();
        assert_eq!(apply_blur(&img, &delta).unwrap(), img);
        let k = random_kernel(7, &mut rng);
        let flat = ImageTensor::filled(9, 9, 0.3);
        for v in apply_blur(&flat, &k).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_kernel(7, &mut rng);
        assert!(apply_blur(&ImageTensor::filled(5, 9, 0.1), &k).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn blur_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_kernel(3, &mut rng);
            let x = Array::<f32>::uniform([3, 8, 8], -1.0, 1.0, &mut rng);
            let y = Array::<f32>::uniform([3, 8, 8], -1.0, 1.0, &mut rng);
            let mix = x.zip_map(&y, |p, q| a * p + b * q);
            let lhs = blur_array(&mix, &k).unwrap();
            let (bx, by) = (blur_array(&x, &k).unwrap(), blur_array(&y, &k).unwrap());
            for i in 0..lhs.len() {
                let rhs = a * bx.data()[i] + b * by.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-6);
            }
        }
    }
}
