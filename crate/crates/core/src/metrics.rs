//! PSNR, SSIM, perceptual distance and a Fréchet distance over extractor
//! features (reported as FID-proxy).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize, Serializer};
use ugp_nn::{no_grad, Var};

use crate::data::ImageTensor;
use crate::error::{invalid, shape_err, Result};
use crate::losses::{perceptual, PerceptualExtractor};

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(shape_err!(
            "{:?} vs {:?}",
            a.pixels().shape(),
            b.pixels().shape()
        ));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gauss_window() -> Vec<f64> {
    let r = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..k).map(|j| g[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean luminance-contrast-structure index and mean contrast-structure term.
fn ssim_parts(a: &ImageTensor, b: &ImageTensor) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(invalid!(
            "SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"
        ));
    }
    let g = gauss_window();
    let (mut total, mut total_cs, mut count) = (0.0, 0.0, 0usize);
    for c in 0..3 {
        let pa: Vec<f64> = a.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &g);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &g);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let cs = (2.0 * cov + C2) / (va + vb + C2);
            let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
            total += l * cs;
            total_cs += cs;
            count += 1;
        }
    }
    Ok((total / count as f64, total_cs / count as f64))
}

/// Gaussian-window SSIM averaged over channels and valid positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(ssim_parts(a, b)?.0)
}

/// Contrast-structure part of SSIM alone.
pub fn ssim_contrast_structure(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(ssim_parts(a, b)?.1)
}

pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    ext: &PerceptualExtractor<f64>,
) -> Result<f64> {
    check_pair(a, b)?;
    no_grad(|| perceptual(a, b, ext))
}

/// Globally pooled final-stage extractor features, one row per image.
pub fn pooled_features(
    images: &[ImageTensor],
    ext: &PerceptualExtractor<f64>,
) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        images
            .iter()
            .map(|img| {
                let x = Var::constant(img.pixels().cast::<f64>().reshape([
                    1,
                    3,
                    img.height(),
                    img.width(),
                ]));
                let f = ext.stage(&x, ext.num_stages() - 1)?;
                Ok(f.global_avg_pool().value().data().to_vec())
            })
            .collect()
    })
}

fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(invalid!(
            "Fréchet distance needs at least 2 samples per set, got {n}"
        ));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(shape_err!("ragged or empty feature rows"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// Symmetric PSD square root; eigenvalues down to -1e-8 count as zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| {
        if v < -1e-8 {
            log::warn!("clamping negative eigenvalue {v:e} in matrix square root");
        }
        v.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussian
/// fits of two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(shape_err!(
            "feature sizes {} and {}",
            mu_a.len(),
            mu_b.len()
        ));
    }
    // Tr((S_a S_b)^(1/2)) = Tr((sqrt(S_a) S_b sqrt(S_a))^(1/2))
    let ra = psd_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let tr_sqrt: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let diff = &mu_a - &mu_b;
    let fd = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

pub fn frechet_distance(
    set_a: &[ImageTensor],
    set_b: &[ImageTensor],
    ext: &PerceptualExtractor<f64>,
) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(invalid!("Fréchet distance needs at least 2 images per set"));
    }
    frechet_from_features(&pooled_features(set_a, ext)?, &pooled_features(set_b, ext)?)
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn inf_from_any<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!(
            "unexpected number string {s:?}"
        ))),
    }
}

/// Corpus-level evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "inf_as_string", deserialize_with = "inf_from_any")]
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub fid_proxy: f64,
    pub n: usize,
}

/// Means of the per-image metrics plus the set-level Fréchet distance.
pub fn evaluate(
    pred: &[ImageTensor],
    gt: &[ImageTensor],
    ext: &PerceptualExtractor<f64>,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(invalid!(
            "{} predictions for {} references",
            pred.len(),
            gt.len()
        ));
    }
    if pred.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let n = pred.len();
    let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(gt) {
        p += psnr(a, b)?;
        s += ssim(a, b)?;
        l += perceptual_distance(a, b, ext)?;
    }
    let fid_proxy = frechet_distance(pred, gt, ext)?;
    let k = n as f64;
    Ok(EvalReport {
        psnr: p / k,
        ssim: s / k,
        perceptual: l / k,
        fid_proxy,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ExtractorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ugp_nn::Array;

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array::uniform([3, h, w], 0.0, 1.0, rng)).unwrap()
    }

    fn noisy_copy(rng: &mut ChaCha8Rng, a: &ImageTensor, amp: f64) -> ImageTensor {
        let n = Array::<f32>::uniform(a.pixels().shape().to_vec(), -amp, amp, rng);
        ImageTensor::from_clipped(a.pixels().zip_map(&n, |x, e| x + e)).unwrap()
    }

    /// Literal definition: full 2-D window sums at every valid position.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let (h, w) = (a.height(), a.width());
        let mut win = [[0.0f64; 11]; 11];
        let mut z = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / 4.5)).exp();
                z += *v;
            }
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / z;
                            let (p, q) =
                                (a.at(c, y + i, x + j) as f64, b.at(c, y + i, x + j) as f64);
                            ma += wt * p;
                            mb += wt * q;
                            saa += wt * p * p;
                            sbb += wt * q * q;
                            sab += wt * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    /// Denman–Beavers iteration for the principal square root of a dense
    /// (not necessarily symmetric) matrix.
    fn denman_beavers(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = m.clone();
        let mut z = DMatrix::identity(m.nrows(), m.ncols());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            let nz = (&z + yi) * 0.5;
            y = ny;
            z = nz;
        }
        y
    }

    fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let fit = |rows: &[Vec<f64>]| {
            let (n, d) = (rows.len(), rows[0].len());
            let mu: Vec<f64> = (0..d)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
                .collect();
            let cov = DMatrix::from_fn(d, d, |i, j| {
                rows.iter()
                    .map(|r| (r[i] - mu[i]) * (r[j] - mu[j]))
                    .sum::<f64>()
                    / (n as f64 - 1.0)
            });
            (mu, cov)
        };
        let ((ma, ca), (mb, cb)) = (fit(a), fit(b));
        let s = denman_beavers(&(&ca * &cb));
        let gap: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        gap + ca.trace() + cb.trace() - 2.0 * s.trace()
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(8, 8, 0.2);
        let b = ImageTensor::filled(8, 8, 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.25) - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &ImageTensor::filled(8, 9, 0.1)).is_err());
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (a, b) = (rand_img(&mut rng, 32, 32), rand_img(&mut rng, 32, 32));
            let mut se = 0.0;
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        se += (a.at(c, y, x) as f64 - b.at(c, y, x) as f64).powi(2);
                    }
                }
            }
            let want = 10.0 * (1.0 / (se / 3072.0)).log10();
            assert!((psnr(&a, &b).unwrap() - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn ssim_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = rand_img(&mut rng, 32, 32);
            let b = noisy_copy(&mut rng, &a, 0.3);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() <= 1e-4);
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (rand_img(&mut rng, 16, 20), rand_img(&mut rng, 16, 20));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&rand_img(&mut rng, 10, 30), &rand_img(&mut rng, 10, 30)).is_err());
    }

    #[test]
    fn ssim_shift_leaves_contrast_structure_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Array::<f32>::uniform([3, 24, 24], 0.2, 0.6, &mut rng);
        let other = base.zip_map(&Array::uniform([3, 24, 24], -0.1, 0.1, &mut rng), |x, e| {
            x + e
        });
        let shift = |x: &Array<f32>, s: f32| ImageTensor::new(x.map(|v| v + s)).unwrap();
        let (a, b) = (shift(&base, 0.0), shift(&other, 0.0));
        let (a2, b2) = (shift(&base, 0.25), shift(&other, 0.25));
        let d =
            ssim_contrast_structure(&a, &b).unwrap() - ssim_contrast_structure(&a2, &b2).unwrap();
        assert!(d.abs() <= 1e-6, "{d}");
        assert!((ssim(&a2, &a2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_equals_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ext = PerceptualExtractor::<f64>::new(&ExtractorConfig::default()).unwrap();
        let (a, b) = (rand_img(&mut rng, 16, 16), rand_img(&mut rng, 16, 16));
        assert_eq!(perceptual_distance(&a, &a, &ext).unwrap(), 0.0);
        let d = perceptual_distance(&a, &b, &ext).unwrap();
        assert!((d - perceptual(&a, &b, &ext).unwrap()).abs() <= 1e-7);
        assert!((d - perceptual_distance(&b, &a, &ext).unwrap()).abs() <= 1e-12);
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| shift + rng.random::<f64>() * (1.0 + j as f64 * 0.3))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = cloud(&mut rng, 12, 5, 0.0);
        assert!(frechet_from_features(&a, &a).unwrap().abs() <= 1e-6);
        // +/- s e_i around a mean gives covariance 2 s^2 / (2d - 1) I
        let d = 6;
        let s = ((2 * d - 1) as f64 / 2.0).sqrt();
        let star = |mu: &[f64]| {
            let mut rows = Vec::new();
            for i in 0..d {
                for sign in [-1.0, 1.0] {
                    let mut r = mu.to_vec();
                    r[i] += sign * s;
                    rows.push(r);
                }
            }
            rows
        };
        let mu_a = vec![0.0; d];
        let mu_b: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.2).collect();
        let gap: f64 = mu_b.iter().map(|v| v * v).sum();
        assert!((frechet_from_features(&star(&mu_a), &star(&mu_b)).unwrap() - gap).abs() <= 1e-4);
        assert!(frechet_from_features(&a[..1], &a).is_err());
    }

    #[test]
    fn frechet_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = cloud(&mut rng, 10, 4, 0.0);
            let b = cloud(&mut rng, 9, 4, 0.3);
            let got = frechet_from_features(&a, &b).unwrap();
            let want = frechet_oracle(&a, &b);
            assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
            assert!((got - frechet_from_features(&b, &a).unwrap()).abs() <= 1e-6);
        }
    }

    #[test]
    fn report_serializes_infinite_psnr_as_string() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ext = PerceptualExtractor::<f64>::new(&ExtractorConfig::default()).unwrap();
        let imgs: Vec<_> = (0..3).map(|_| rand_img(&mut rng, 16, 16)).collect();
        let r = evaluate(&imgs, &imgs, &ext).unwrap();
        assert!(r.fid_proxy <= 1e-6);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["psnr"], "inf");
        assert_eq!(json["n"], 3);
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.psnr, f64::INFINITY);
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-6f64..1.0, m2 in 1e-6f64..1.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1) > psnr_from_mse(m2));
        }

        #[test]
        fn frechet_is_nonnegative_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 8, 3, 0.0);
            let shift = rng.random::<f64>();
            let b = cloud(&mut rng, 7, 3, shift);
            let ab = frechet_from_features(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - frechet_from_features(&b, &a).unwrap()).abs() <= 1e-6);
        }
    }
}
