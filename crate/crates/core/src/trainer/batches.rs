use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ugp_nn::Array;

use crate::data::{load_image, stack_images, DatasetManifest, ImageTensor};
use crate::degrade::upsample_bicubic;
use crate::error::{shape_err, Result, UgpError};
use crate::trainer::checkpoint::RngState;

/// Clean and degraded images held in memory, degraded inputs brought to the
/// clean resolution.
#[derive(Clone, Debug)]
pub struct PairedImages {
    pub clean: Vec<ImageTensor>,
    pub degraded: Vec<ImageTensor>,
}

impl PairedImages {
    pub fn from_manifest(m: &DatasetManifest, resolution: usize) -> Result<Self> {
        if m.is_empty() {
            return Err(UgpError::EmptyDataset("manifest has no entries".into()));
        }
        let mut clean = Vec::with_capacity(m.len());
        let mut degraded = Vec::with_capacity(m.len());
        for e in &m.entries {
            let c = load_image(Path::new(&e.clean_path))?;
            if c.height() != resolution || c.width() != resolution {
                return Err(shape_err!(
                    "{} is {}x{}, expected {resolution}x{resolution}",
                    e.clean_path,
                    c.height(),
                    c.width()
                ));
            }
            let mut d = load_image(Path::new(&e.degraded_path))?;
            if d.height() != resolution || d.width() != resolution {
                d = upsample_bicubic(&d, resolution, resolution)?;
            }
            clean.push(c);
            degraded.push(d);
        }
        Ok(Self { clean, degraded })
    }

    pub fn load(path: &Path, resolution: usize) -> Result<Self> {
        Self::from_manifest(&DatasetManifest::load(path)?, resolution)
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Stacks the selected images into an NCHW batch.
pub fn gather(images: &[ImageTensor], idx: &[usize]) -> Result<Array<f32>> {
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &images[i]).collect();
    stack_images(&refs)
}

/// Stacks rows `idx` of a per-sample `[C, H, W]` list.
pub fn gather_arrays(items: &[Array<f32>], idx: &[usize]) -> Array<f32> {
    let refs: Vec<&Array<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Array::stack(&refs)
}

/// Epoch-wise shuffled index stream.
pub struct Sampler {
    rng: ChaCha8Rng,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }
}
