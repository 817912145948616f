use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use ugp_nn::Array;

use crate::data::ImageTensor;
use crate::error::{invalid, Result};

/// Photon counts at or above this scale disable shot noise.
pub const POISSON_PASSTHROUGH: f64 = 1e9;

/// `Poisson(x k) / k + N(0, sigma^2)` per pixel, without clipping.
pub fn noise_unclipped(x: &Array<f32>, sigma: f64, k: f64, seed: u64) -> Result<Array<f32>> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(invalid!("photon scale k must be positive, got {k}"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid!("sigma must be non-negative, got {sigma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, sigma).map_err(|e| invalid!("{e}"))?;
    let shot = k < POISSON_PASSTHROUGH;
    let data = x.data().iter().map(|&v| {
        let v = v as f64;
        let mut y = if shot {
            let lambda = v * k;
            if lambda > 0.0 {
                Poisson::new(lambda)
                    .map(|p| p.sample(&mut rng) / k)
                    .unwrap_or(v)
            } else {
                0.0
            }
        } else {
            v
        };
        if sigma > 0.0 {
            y += gauss.sample(&mut rng);
        }
        y as f32
    });
    Ok(Array::from_vec(x.shape().to_vec(), data.collect()))
}

/// Shot noise then Gaussian read noise, clipped to `[0, 1]`.
pub fn add_noise(img: &ImageTensor, sigma: f64, k: f64, seed: u64) -> Result<ImageTensor> {
    ImageTensor::from_clipped(noise_unclipped(img.pixels(), sigma, k, seed)?)
}
