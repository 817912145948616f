use ugp_nn::Array;

use crate::data::ImageTensor;
use crate::error::{invalid, shape_err, Result};

const A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per output index: `(source indices, weights)` for resampling `n_in -> n_out`
/// with half-pixel centers. When shrinking, the kernel is stretched by the
/// scale factor so it also low-passes; edges replicate.
fn taps(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let wt = cubic((j as f64 - center) / stretch);
                if wt != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(wt);
                }
            }
            let total: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|v| *v /= total);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resampling of a `[c, h, w]` array, unclipped.
pub fn resize_array(x: &Array<f32>, out_h: usize, out_w: usize) -> Result<Array<f32>> {
    if x.ndim() != 3 {
        return Err(shape_err!("expected [c, h, w], got {:?}", x.shape()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("empty output size"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = x.data();
    let mut mid = vec![0f64; c * h * out_w];
    for p in 0..c * h {
        let row = &src[p * w..(p + 1) * w];
        for (ox, (idx, wts)) in tx.iter().enumerate() {
            mid[p * out_w + ox] = idx
                .iter()
                .zip(wts)
                .map(|(&i, &wt)| wt * row[i] as f64)
                .sum();
        }
    }
    let mut out = vec![0f32; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (idx, wts)) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let v: f64 = idx
                    .iter()
                    .zip(wts)
                    .map(|(&i, &wt)| wt * mid[(ch * h + i) * out_w + ox])
                    .sum();
                out[(ch * out_h + oy) * out_w + ox] = v as f32;
            }
        }
    }
    Ok(Array::from_vec([c, out_h, out_w], out))
}

pub fn downsample_bicubic(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(invalid!("factor must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid!("{h}x{w} is not divisible by {factor}"));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    ImageTensor::from_clipped(resize_array(img.pixels(), h / factor, w / factor)?)
}

/// Bicubic enlargement to `(h, w)`, used to bring low-resolution inputs to
/// network resolution.
pub fn upsample_bicubic(img: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    if h == img.height() && w == img.width() {
        return Ok(img.clone());
    }
    ImageTensor::from_clipped(resize_array(img.pixels(), h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn catmull_rom_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // a = -0.5 at x = 0.5: (1.5 * 0.5 - 2.5) * 0.25 + 1
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn shapes_identity_and_constants() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let img = ImageTensor::new(Array::uniform([3, 64, 64], 0.0, 1.0, &mut rng)).unwrap();
        assert_eq!(downsample_bicubic(&img, 1).unwrap(), img);
        let small = downsample_bicubic(&img, 8).unwrap();
        assert_eq!((small.height(), small.width()), (8, 8));
        let flat = ImageTensor::filled(32, 32, 0.37);
        for v in downsample_bicubic(&flat, 4).unwrap().data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
        for v in upsample_bicubic(&downsample_bicubic(&flat, 4).unwrap(), 32, 32)
            .unwrap()
            .data()
        {
            assert!((v - 0.37).abs() < 1e-6);
        }
        assert!(downsample_bicubic(&ImageTensor::filled(10, 12, 0.1), 4).is_err());
    }

    #[test]
    fn integer_scale_taps_are_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Array::<f32>::uniform([1, 5, 7], 0.0, 1.0, &mut rng);
        assert_eq!(resize_array(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn downsample_of_linear_ramp_samples_cell_centers() {
        // on a linear ramp the symmetric, normalized filter returns the value
        // at the output pixel's center away from the borders
        let w = 32;
        let data: Vec<f32> = (0..w).map(|x| x as f32 / 64.0).collect();
        let x = Array::from_vec([1, 1, w], data);
        let y = resize_array(&x, 1, 8).unwrap();
        for o in 2..6 {
            let center = (o as f64 + 0.5) * 4.0 - 0.5;
            assert!((y.data()[o] as f64 - center / 64.0).abs() < 1e-6);
        }
    }
}
