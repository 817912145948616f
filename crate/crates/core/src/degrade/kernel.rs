use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, UgpError};

/// Square, non-negative, unit-sum blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    /// Clamps negatives to zero and normalizes to unit sum.
    pub fn from_weights(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(invalid!("kernel size must be odd, got {size}"));
        }
        if weights.len() != size * size {
            return Err(invalid!(
                "{} weights for a {size}x{size} kernel",
                weights.len()
            ));
        }
        let mut weights: Vec<f64> = weights
            .into_iter()
            .map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid!("kernel has no positive mass"));
        }
        weights.iter_mut().for_each(|v| *v /= total);
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(row, col)` center of mass.
    pub fn center_of_mass(&self) -> (f64, f64) {
        let (mut cy, mut cx) = (0.0, 0.0);
        for (i, &v) in self.weights.iter().enumerate() {
            cy += v * (i / self.size) as f64;
            cx += v * (i % self.size) as f64;
        }
        (cy, cx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub steps: usize,
    pub inertia: f64,
    /// Gaussian angular noise per step, radians.
    pub angular_sigma: f64,
    /// Log-normal multiplicative noise on the step magnitude.
    pub magnitude_sigma: f64,
    pub smooth_sigma: f64,
    /// Range of the trajectory radius relative to the usable half-width.
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            steps: 2000,
            inertia: 0.99,
            angular_sigma: 0.2,
            magnitude_sigma: 0.1,
            smooth_sigma: 1.0,
            min_extent: 0.25,
            max_extent: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps on `[-r, r]`, `r = ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable smoothing with zero outside the grid.
fn smooth(grid: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let d = t as isize - r;
                    let (sy, sx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if (0..n as isize).contains(&sy) && (0..n as isize).contains(&sx) {
                        acc += wt * src[sy as usize * n + sx as usize];
                    }
                }
                out[y * n + x] = acc;
            }
        }
        out
    };
    pass(&pass(grid, true), false)
}

/// Inertia-damped random walk; returns the visited points (origin first).
fn trajectory(params: &KernelParams, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let angular = Normal::new(0.0, params.angular_sigma.max(0.0)).expect("finite sigma");
    let magnitude = Normal::new(0.0, params.magnitude_sigma.max(0.0)).expect("finite sigma");
    let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
    let mut mag = 1.0f64;
    let mut vel = (theta.cos(), theta.sin());
    let mut p = (0.0, 0.0);
    let mut pts = vec![p];
    for _ in 0..params.steps {
        theta += angular.sample(rng);
        mag *= magnitude.sample(rng).exp();
        let target = (mag * theta.cos(), mag * theta.sin());
        vel = (
            params.inertia * vel.0 + (1.0 - params.inertia) * target.0,
            params.inertia * vel.1 + (1.0 - params.inertia) * target.1,
        );
        p = (p.0 + vel.0, p.1 + vel.1);
        pts.push(p);
    }
    pts
}

fn generate_one(size: usize, params: &KernelParams, rng: &mut ChaCha8Rng) -> Result<BlurKernel> {
    let pts = trajectory(params, rng);
    let center = (size / 2) as f64;
    // keep the smoothed support inside the grid
    let margin = (3.0 * params.smooth_sigma).ceil().max(0.0) + 1.0;
    let half = (center - margin).max(0.0);
    let extent =
        params.min_extent + rng.random::<f64>() * (params.max_extent - params.min_extent).max(0.0);
    let m = pts.len() as f64;
    let mean = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / m, a.1 + p.1 / m));
    let radius = pts
        .iter()
        .map(|p| ((p.0 - mean.0).powi(2) + (p.1 - mean.1).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 {
        extent * half / radius
    } else {
        0.0
    };

    let mut grid = vec![0.0; size * size];
    let w = 1.0 / m;
    for p in &pts {
        let (x, y) = (
            center + (p.0 - mean.0) * scale,
            center + (p.1 - mean.1) * scale,
        );
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                if (0..size as isize).contains(&yy) && (0..size as isize).contains(&xx) {
                    grid[yy as usize * size + xx as usize] += w * wy * wx;
                }
            }
        }
    }
    let kernel = BlurKernel::from_weights(size, smooth(&grid, size, params.smooth_sigma))?;
    recenter(kernel)
}

/// Integer shift bringing the center of mass within half a pixel of center.
fn recenter(k: BlurKernel) -> Result<BlurKernel> {
    let n = k.size;
    let c = (n / 2) as f64;
    let (cy, cx) = k.center_of_mass();
    let (sy, sx) = ((c - cy).round() as isize, (c - cx).round() as isize);
    if sy == 0 && sx == 0 {
        return Ok(k);
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n as isize {
        for x in 0..n as isize {
            let (ty, tx) = (y + sy, x + sx);
            if (0..n as isize).contains(&ty) && (0..n as isize).contains(&tx) {
                out[ty as usize * n + tx as usize] = k.weights[y as usize * n + x as usize];
            }
        }
    }
    BlurKernel::from_weights(n, out)
}

pub fn generate_kernel_bank_with(
    n: usize,
    size: usize,
    seed: u64,
    params: &KernelParams,
) -> Result<Vec<BlurKernel>> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(invalid!("kernel size must be odd, got {size}"));
    }
    if n == 0 {
        return Err(invalid!("kernel bank needs at least one kernel"));
    }
    if !(0.0..1.0).contains(&params.inertia)
        || params.angular_sigma < 0.0
        || params.smooth_sigma < 0.0
    {
        return Err(invalid!("invalid trajectory parameters {params:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| generate_one(size, params, &mut rng))
        .collect()
}

pub fn generate_kernel_bank(n: usize, size: usize, seed: u64) -> Result<Vec<BlurKernel>> {
    generate_kernel_bank_with(n, size, seed, &KernelParams::default())
}

#[derive(Debug, Serialize, Deserialize)]
struct BankSidecar {
    n: usize,
    size: usize,
    seed: u64,
    params: KernelParams,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes raw little-endian f32 weights plus a `<path>.json` sidecar.
pub fn save_kernel_bank(
    path: &Path,
    bank: &[BlurKernel],
    seed: u64,
    params: &KernelParams,
) -> Result<()> {
    let size = bank
        .first()
        .ok_or_else(|| invalid!("empty kernel bank"))?
        .size;
    let mut bytes = Vec::with_capacity(bank.len() * size * size * 4);
    for k in bank {
        if k.size != size {
            return Err(invalid!("mixed kernel sizes in bank"));
        }
        for &v in &k.weights {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    let meta = BankSidecar {
        n: bank.len(),
        size,
        seed,
        params: params.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_kernel_bank(path: &Path) -> Result<Vec<BlurKernel>> {
    let side = sidecar_path(path);
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => UgpError::NotFound(p.display().to_string()),
            _ => UgpError::Io(e),
        })
    };
    let meta: BankSidecar = serde_json::from_slice(&read(&side)?)
        .map_err(|e| UgpError::Format(format!("{}: {e}", side.display())))?;
    let bytes = read(path)?;
    let per = meta.size * meta.size;
    if bytes.len() != meta.n * per * 4 {
        return Err(UgpError::Format(format!(
            "{}: {} bytes, sidecar declares {} kernels of {}x{}",
            path.display(),
            bytes.len(),
            meta.n,
            meta.size,
            meta.size
        )));
    }
    bytes
        .chunks_exact(per * 4)
        .map(|chunk| {
            let w = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            BlurKernel::from_weights(meta.size, w)
        })
        .collect()
}
