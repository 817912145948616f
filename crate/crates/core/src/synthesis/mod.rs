//! Generative-prior branch: an encoder into a spatial base code plus a stack
//! of style vectors, a style-modulated generator seeded by that base code,
//! and the adversarial critic used to train both.

mod discriminator;
mod encoder;
mod generator;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugp_nn::{impl_module, Array, Float, Var};

use crate::data::{stack_images, ImageTensor};
use crate::error::{invalid, shape_err, Result, UgpError};

pub use discriminator::{DiscBlock, Discriminator};
pub use encoder::{Encoder, Map2Style};
pub use generator::{GenBlock, Generator, GeneratorOutput, PriorHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub resolution: usize,
    pub base_res: usize,
    /// Channels at each resolution above `base_res`, coarse to fine.
    pub channels: Vec<usize>,
    /// Channels of the base code.
    pub base_channels: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_res: 8,
            channels: vec![256, 128, 64],
            base_channels: 256,
            style_dim: 128,
            mapping_layers: 4,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 2 && v.is_power_of_two();
        if !pow2(self.resolution) || !pow2(self.base_res) || self.base_res >= self.resolution {
            return Err(invalid!(
                "resolution {} / base {} must be powers of two with base < resolution",
                self.resolution,
                self.base_res
            ));
        }
        if self.channels.len() != self.levels() {
            return Err(invalid!(
                "need {} channel entries, got {}",
                self.levels(),
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) || self.base_channels == 0 || self.style_dim == 0 {
            return Err(invalid!("widths must be positive"));
        }
        Ok(())
    }

    /// Number of resolutions above the base.
    pub fn levels(&self) -> usize {
        (self.resolution / self.base_res).trailing_zeros() as usize
    }

    /// Style slots `L`: one for the base block, two per level.
    pub fn num_styles(&self) -> usize {
        2 * self.levels() + 1
    }

    pub fn channels_at(&self, res: usize) -> usize {
        if res <= self.base_res {
            return self.base_channels;
        }
        let i = (res / self.base_res).trailing_zeros() as usize - 1;
        self.channels[i.min(self.channels.len() - 1)]
    }

    /// Channels of `f_syn`.
    pub fn syn_channels(&self) -> usize {
        self.channels_at(self.resolution)
    }

    pub fn meta(&self) -> SynthesisMeta {
        SynthesisMeta {
            resolution: self.resolution,
            base_res: self.base_res,
            style_dim: self.style_dim,
            num_styles: self.num_styles(),
            channels: self.channels.clone(),
            base_channels: self.base_channels,
        }
    }
}

/// Checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisMeta {
    pub resolution: usize,
    pub base_res: usize,
    #[serde(rename = "D")]
    pub style_dim: usize,
    #[serde(rename = "L")]
    pub num_styles: usize,
    pub channels: Vec<usize>,
    pub base_channels: usize,
}

/// Spatial base code `[n, C_F, h_F, w_F]` and style stack `[n, L, D]`.
#[derive(Clone, Debug)]
pub struct LatentCode<T: Float> {
    pub base: Var<T>,
    pub styles: Var<T>,
}

impl<T: Float> LatentCode<T> {
    /// Repeats one `[n, D]` style into every slot.
    pub fn broadcast(base: Var<T>, w: &Var<T>, slots: usize) -> Self {
        let (n, d) = (w.shape()[0], w.shape()[1]);
        let w3 = w.reshape([n, 1, d]);
        let styles = Var::concat(&vec![w3; slots], 1);
        Self { base, styles }
    }

    pub fn num_styles(&self) -> usize {
        self.styles.shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.base.value().all_finite() && self.styles.value().all_finite()
    }
}

pub struct SynthesisOutput {
    pub x_syn: ImageTensor,
    /// `[C_syn, H, W]`
    pub f_syn: Array<f32>,
}

/// Encoder and generator trained together; the critic is kept apart.
#[derive(Clone, Debug)]
pub struct SynthesisModule<T: Float> {
    pub encoder: Encoder<T>,
    pub generator: Generator<T>,
    cfg: SynthesisConfig,
}

impl_module!(SynthesisModule { encoder, generator });

impl<T: Float> SynthesisModule<T> {
    pub fn new(cfg: &SynthesisConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(cfg, &mut rng);
        let encoder = Encoder::new(cfg, &mut rng);
        Ok(Self {
            encoder,
            generator,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.cfg
    }

    fn check_image(&self, x: &Var<T>) -> Result<()> {
        check_input(&self.cfg, x)
    }

    pub fn encode(&self, x_reg: &Var<T>) -> Result<LatentCode<T>> {
        self.check_image(x_reg)?;
        Ok(self.encoder.forward(x_reg))
    }

    /// Raw generator output (`[-1, 1]`, unclipped) and features.
    pub fn generate_raw(&self, code: &LatentCode<T>) -> Result<GeneratorOutput<T>> {
        let n = code.base.shape()[0];
        let (cf, b) = (self.cfg.base_channels, self.cfg.base_res);
        if code.base.shape() != [n, cf, b, b] {
            return Err(shape_err!(
                "base code {:?}, expected [{n}, {cf}, {b}, {b}]",
                code.base.shape()
            ));
        }
        let (l, d) = (self.cfg.num_styles(), self.cfg.style_dim);
        if code.styles.shape() != [n, l, d] {
            return Err(shape_err!(
                "styles {:?}, expected [{n}, {l}, {d}]",
                code.styles.shape()
            ));
        }
        if !code.is_finite() {
            return Err(UgpError::Numeric(
                "latent code has non-finite entries".into(),
            ));
        }
        Ok(self.generator.forward(code))
    }

    /// `x_syn` in `[0, 1]` and `f_syn`.
    pub fn generate(&self, code: &LatentCode<T>) -> Result<(Var<T>, Var<T>)> {
        let out = self.generate_raw(code)?;
        Ok((unit_clip(&out.raw), out.f_syn))
    }

    pub fn synthesize(&self, x_reg: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.generate(&self.encode(x_reg)?)
    }

    /// Unconditional sample from latent `z: [n, D]`.
    pub fn sample(&self, z: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        self.generate(&self.generator.prior_code(z))
    }
}

impl SynthesisModule<f32> {
    pub fn synthesize_images(&self, x_reg: &[&ImageTensor]) -> Result<Vec<SynthesisOutput>> {
        let x = Var::constant(stack_images(x_reg)?);
        let (x_syn, f_syn) = ugp_nn::no_grad(|| self.synthesize(&x))?;
        (0..x_reg.len())
            .map(|i| {
                Ok(SynthesisOutput {
                    x_syn: ImageTensor::from_clipped(strip0(x_syn.value().slice0(i, 1)))?,
                    f_syn: strip0(f_syn.value().slice0(i, 1)),
                })
            })
            .collect()
    }
}

fn strip0<T: Float>(a: Array<T>) -> Array<T> {
    let s = a.shape()[1..].to_vec();
    a.reshape(s)
}

/// `clip((x + 1) / 2, 0, 1)`
pub fn unit_clip<T: Float>(x: &Var<T>) -> Var<T> {
    x.add_scalar(1.0).scale(0.5).clamp(0.0, 1.0)
}

fn check_input<T: Float>(cfg: &SynthesisConfig, x: &Var<T>) -> Result<()> {
    let s = x.shape();
    let r = cfg.resolution;
    if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
        return Err(shape_err!("expected [n, 3, {r}, {r}] input, got {s:?}"));
    }
    Ok(())
}

/// Critic with its configured input resolution.
#[derive(Clone, Debug)]
pub struct Critic<T: Float> {
    pub net: Discriminator<T>,
    cfg: SynthesisConfig,
}

impl_module!(Critic { net });

impl<T: Float> Critic<T> {
    pub fn new(cfg: &SynthesisConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: Discriminator::new(cfg, &mut rng),
            cfg: cfg.clone(),
        })
    }

    /// `[n, 3, R, R]` in `[0, 1]` to `[n]` logits.
    pub fn discriminate(&self, x: &Var<T>) -> Result<Var<T>> {
        check_input(&self.cfg, x)?;
        let n = x.shape()[0];
        Ok(self.net.forward(x).reshape([n]))
    }
}

#[cfg(test)]
mod tests;
