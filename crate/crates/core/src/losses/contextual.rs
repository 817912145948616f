use serde::{Deserialize, Serialize};
use ugp_nn::{Array, Float, Var};

use crate::error::{invalid, shape_err, Result};
use crate::losses::unit_normalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextualConfig {
    pub eps: f64,
    pub bandwidth: f64,
    pub radius: usize,
    /// Extractor stage whose features are compared.
    pub stage: usize,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            bandwidth: 0.5,
            radius: 2,
            stage: 1,
        }
    }
}

/// Distance assigned to window positions outside the map; large enough that
/// their affinity underflows to exactly zero.
const OUTSIDE: f64 = 1e4;

/// Windowed contextual loss between two `[n, c, h, w]` feature maps,
/// averaged over the batch.
pub fn contextual_patch<T: Float>(
    a: &Var<T>,
    b: &Var<T>,
    radius: usize,
    bandwidth: f64,
    eps: f64,
) -> Result<Var<T>> {
    if a.shape() != b.shape() || a.value().ndim() != 4 {
        return Err(shape_err!(
            "contextual loss needs equal NCHW maps, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (n, c, h, w) = a.dims4();
    if n * c * h * w == 0 {
        return Err(invalid!("empty contextual window"));
    }
    if !(bandwidth > 0.0) || !(eps > 0.0) {
        return Err(invalid!("bandwidth and eps must be positive"));
    }
    let mu = b.reshape([n, c, h * w]).mean_axis(2).reshape([n, c, 1, 1]);
    let an = unit_normalize(&a.sub(&mu));
    let bn = unit_normalize(&b.sub(&mu));
    let r = radius as isize;
    let mut dists = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            let sim = an.mul(&bn.shift2d(dy, dx)).sum_axis(1);
            let d = sim.neg().add_scalar(1.0);
            let mut valid = Array::<T>::zeros([1, 1, h, w]);
            let mut any_invalid = false;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let inside =
                        (0..h as isize).contains(&(y + dy)) && (0..w as isize).contains(&(x + dx));
                    any_invalid |= !inside;
                    valid.data_mut()[(y * w as isize + x) as usize] =
                        if inside { T::one() } else { T::zero() };
                }
            }
            let d = if any_invalid {
                let outside = valid.map(|v| (T::one() - v) * T::of(OUTSIDE));
                d.mul(&Var::constant(valid)).add(&Var::constant(outside))
            } else {
                d
            };
            dists.push(d);
        }
    }
    let d = Var::concat(&dists, 1);
    let rel = d.div(&d.min_axis(1).add_scalar(eps));
    let wgt = rel.neg().add_scalar(1.0).scale(1.0 / bandwidth).exp();
    let cx = wgt.max_axis(1).div(&wgt.sum_axis(1));
    let per_sample = cx.reshape([n, h * w]).mean_axis(1).ln().neg();
    Ok(per_sample.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use ugp_nn::gradcheck::input_probes;

    /// Literal per-position evaluation of the definition.
    #[allow(clippy::needless_range_loop)]
    fn oracle(a: &Array<f64>, b: &Array<f64>, r: isize, bw: f64, eps: f64) -> f64 {
        let (n, c, h, w) = a.dims4();
        let mut total = 0.0;
        for s in 0..n {
            let mut mu = vec![0.0; c];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        mu[ch] += b.at4(s, ch, y, x) / (h * w) as f64;
                    }
                }
            }
            let vec_at = |m: &Array<f64>, y: usize, x: usize| -> Vec<f64> {
                (0..c).map(|ch| m.at4(s, ch, y, x) - mu[ch]).collect()
            };
            let cos_dist = |p: &[f64], q: &[f64]| {
                let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = p.iter().zip(q).map(|(x, y)| x * y).sum();
                1.0 - dot / (np * nq)
            };
            let mut sum_cx = 0.0;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let ai = vec_at(a, y as usize, x as usize);
                    let mut ds = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                ds.push(cos_dist(&ai, &vec_at(b, yy as usize, xx as usize)));
                            }
                        }
                    }
                    let dmin = ds.iter().cloned().fold(f64::INFINITY, f64::min);
                    let ws: Vec<f64> = ds
                        .iter()
                        .map(|d| ((1.0 - d / (dmin + eps)) / bw).exp())
                        .collect();
                    let z: f64 = ws.iter().sum();
                    sum_cx += ws.iter().cloned().fold(0.0, f64::max) / z;
                }
            }
            total += -(sum_cx / (h * w) as f64).ln();
        }
        total / n as f64
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for r in 0..=2 {
            for _ in 0..3 {
                let a = Array::<f64>::randn([1, 8, 4, 4], 1.0, &mut rng);
                let b = Array::<f64>::randn([1, 8, 4, 4], 1.0, &mut rng);
                let got = contextual_patch(
                    &Var::constant(a.clone()),
                    &Var::constant(b.clone()),
                    r,
                    0.5,
                    1e-5,
                )
                .unwrap();
                let want = oracle(&a, &b, r as isize, 0.5, 1e-5);
                assert!(
                    (got.item() - want).abs() <= 1e-5,
                    "r={r}: {} vs {want}",
                    got.item()
                );
            }
        }
    }

    #[test]
    fn self_match_with_singleton_window_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f = Var::constant(Array::<f64>::randn([2, 6, 5, 5], 1.0, &mut rng));
        assert!(contextual_patch(&f, &f, 0, 0.5, 1e-5).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn single_position_maps_give_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Var::constant(Array::<f64>::randn([1, 4, 1, 1], 1.0, &mut rng));
        let b = Var::constant(Array::<f64>::randn([1, 4, 1, 1], 1.0, &mut rng));
        assert!(contextual_patch(&a, &b, 2, 0.5, 1e-5).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatch_and_empty() {
        let a = Var::constant(Array::<f64>::zeros([1, 2, 3, 3]));
        let b = Var::constant(Array::<f64>::zeros([1, 2, 3, 4]));
        assert!(contextual_patch(&a, &b, 1, 0.5, 1e-5).is_err());
        let e = Var::constant(Array::<f64>::zeros([1, 2, 0, 3]));
        assert!(contextual_patch(&e, &e, 1, 0.5, 1e-5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = Array::<f64>::randn([1, 4, 4, 4], 1.0, &mut rng);
        let b = Var::constant(Array::<f64>::randn([1, 4, 4, 4], 1.0, &mut rng));
        let probes = input_probes(&a, &[0, 7, 19, 33, 62], 1e-6, |x| {
            contextual_patch(x, &b, 1, 0.5, 1e-5).unwrap()
        });
        for p in probes {
            assert!(p.rel_err() < 1e-3, "{p:?}");
        }
    }
}
