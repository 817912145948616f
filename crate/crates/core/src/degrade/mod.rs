//! Synthetic degradations: shot plus read noise, motion blur, bicubic
//! downsampling.

mod blur;
mod kernel;
mod noise;
mod resize;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blur::{apply_blur, blur_array};
pub use kernel::{
    generate_kernel_bank, generate_kernel_bank_with, load_kernel_bank, save_kernel_bank,
    BlurKernel, KernelParams,
};
pub use noise::{add_noise, noise_unclipped, POISSON_PASSTHROUGH};
pub use resize::{cubic, downsample_bicubic, resize_array, upsample_bicubic};

use crate::data::ImageTensor;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DegradationSpec {
    Noise { sigma: f64, k: f64 },
    Blur { kernel_bank_path: PathBuf },
    Downsample { factor: usize },
}

impl DegradationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| invalid!("degradation spec: {e}"))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Noise { sigma, k } => {
                if !(*sigma >= 0.0) || !(*k > 0.0) {
                    return Err(invalid!(
                        "noise needs sigma >= 0 and k > 0, got sigma={sigma} k={k}"
                    ));
                }
            }
            Self::Blur { .. } => {}
            Self::Downsample { factor } => {
                if *factor == 0 || !factor.is_power_of_two() {
                    return Err(invalid!(
                        "downsample factor must be a power of two, got {factor}"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short stable identifier stored with every manifest entry.
    pub fn id(&self) -> String {
        match self {
            Self::Noise { sigma, k } => format!("noise-s{sigma}-k{k}"),
            Self::Blur { kernel_bank_path } => format!(
                "blur-{}",
                kernel_bank_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ),
            Self::Downsample { factor } => format!("downsample-x{factor}"),
        }
    }

    /// Resolves a relative kernel-bank path against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        match self {
            Self::Blur { kernel_bank_path } if kernel_bank_path.is_relative() => Self::Blur {
                kernel_bank_path: base.join(kernel_bank_path),
            },
            other => other.clone(),
        }
    }
}

/// A validated spec with its kernel bank loaded.
#[derive(Clone, Debug)]
pub struct Degrader {
    spec: DegradationSpec,
    bank: Vec<BlurKernel>,
}

impl Degrader {
    pub fn new(spec: &DegradationSpec) -> Result<Self> {
        spec.validate()?;
        let bank = match spec {
            DegradationSpec::Blur { kernel_bank_path } => load_kernel_bank(kernel_bank_path)?,
            _ => Vec::new(),
        };
        Ok(Self {
            spec: spec.clone(),
            bank,
        })
    }

    pub fn spec(&self) -> &DegradationSpec {
        &self.spec
    }

    /// Kernel chosen uniformly from the bank for `seed`.
    pub fn kernel_index(&self, seed: u64) -> Option<usize> {
        (!self.bank.is_empty())
            .then(|| ChaCha8Rng::seed_from_u64(seed).random_range(0..self.bank.len()))
    }

    pub fn apply(&self, img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        match &self.spec {
            DegradationSpec::Noise { sigma, k } => add_noise(img, *sigma, *k, seed),
            DegradationSpec::Blur { .. } => {
                let i = self
                    .kernel_index(seed)
                    .ok_or_else(|| invalid!("empty kernel bank"))?;
                apply_blur(img, &self.bank[i])
            }
            DegradationSpec::Downsample { factor } => downsample_bicubic(img, *factor),
        }
    }
}

/// Loads any kernel bank and applies `spec`.
pub fn degrade(img: &ImageTensor, spec: &DegradationSpec, seed: u64) -> Result<ImageTensor> {
    Degrader::new(spec)?.apply(img, seed)
}
