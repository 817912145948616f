use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugp_nn::{impl_module, module::cast_state, Conv2d, Float, Module, Var};

use crate::error::{invalid, Result};
use crate::nets::{he, lrelu, to_signed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub seed: u64,
    /// Optional safetensors file replacing the seeded weights.
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            strides: vec![1, 2, 2, 2],
            seed: 0x5eed_f00d,
            weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorStage<T: Float> {
    pub conv: Option<Conv2d<T>>,
    pub normalize: bool,
}

impl_module!(ExtractorStage { conv });

/// Fixed feature pyramid behind the perceptual, contextual and Fréchet
/// measures. Stages are 3x3 convolutions followed by a leaky rectifier; an
/// identity stage passes its input through.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T: Float> {
    pub stages: Vec<ExtractorStage<T>>,
    signed_input: bool,
}

impl_module!(PerceptualExtractor { stages });

impl<T: Float> PerceptualExtractor<T> {
    pub fn new(cfg: &ExtractorConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.len() != cfg.strides.len() {
            return Err(invalid!("extractor needs one stride per stage"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ci = 3;
        let stages = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .map(|(&co, &s)| {
                let conv = Conv2d::new(ci, co, 3, s, he(), &mut rng);
                ci = co;
                ExtractorStage {
                    conv: Some(conv),
                    normalize: true,
                }
            })
            .collect();
        let mut ext = Self {
            stages,
            signed_input: true,
        };
        if let Some(path) = &cfg.weights {
            ext.load_weights(path)?;
        }
        ext.freeze();
        Ok(ext)
    }

    /// `n` identity stages with unit normalization on raw input.
    pub fn identity(n: usize) -> Self {
        let stages = (0..n)
            .map(|_| ExtractorStage {
                conv: None,
                normalize: true,
            })
            .collect();
        Self {
            stages,
            signed_input: false,
        }
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let state = ugp_nn::io::load::<f32>(path)?;
        self.load_state_dict(&cast_state(&state))?;
        self.freeze();
        Ok(())
    }

    fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.stages.iter().fold(in_channels, |c, s| {
            s.conv.as_ref().map_or(c, |k| k.out_channels())
        })
    }

    /// Raw activations of the first `upto` stages.
    pub fn features_upto(&self, x: &Var<T>, upto: usize) -> Vec<Var<T>> {
        let mut h = if self.signed_input {
            to_signed(x)
        } else {
            x.clone()
        };
        let mut out = Vec::with_capacity(upto);
        for stage in self.stages.iter().take(upto) {
            if let Some(conv) = &stage.conv {
                h = lrelu(&conv.forward(&h));
            }
            out.push(h.clone());
        }
        out
    }

    pub fn features(&self, x: &Var<T>) -> Vec<Var<T>> {
        self.features_upto(x, self.stages.len())
    }

    pub fn stage(&self, x: &Var<T>, index: usize) -> Result<Var<T>> {
        if index >= self.stages.len() {
            return Err(invalid!(
                "extractor has {} stages, asked for {index}",
                self.stages.len()
            ));
        }
        Ok(self.features_upto(x, index + 1).pop().unwrap())
    }
}

/// Divides every position's channel vector by its Euclidean norm.
pub fn unit_normalize<T: Float>(f: &Var<T>) -> Var<T> {
    let norm = f.sqr().sum_axis(1).add_scalar(1e-12).sqrt();
    f.div(&norm)
}
