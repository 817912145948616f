//! Feature-domain fusion of the regression and synthesis branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugp_nn::{impl_module, Array, Conv2d, Float, Module, Var};

use crate::data::ImageTensor;
use crate::error::{invalid, shape_err, Result};
use crate::nets::{he, linear_init, ResBlock};

/// Residual blocks in the fusion trunk.
pub const FUSION_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Init `proj_in` at zero so a fresh network ignores `f_syn`.
    pub zero_proj_in: bool,
    /// Channels of the lifted images in the image-domain variant.
    pub image_channels: usize,
    /// Start from the restoration output: copy its final projection into
    /// `proj_out` and zero `proj_in`.
    pub warm_start: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            zero_proj_in: false,
            image_channels: 64,
            warm_start: true,
        }
    }
}

/// `proj_out(trunk(proj_in(f_syn) + f_reg))`
#[derive(Clone, Debug)]
pub struct FusionNetwork<T: Float> {
    pub proj_in: Conv2d<T>,
    pub trunk: Vec<ResBlock<T>>,
    pub proj_out: Conv2d<T>,
}

impl_module!(FusionNetwork {
    proj_in,
    trunk,
    proj_out
});

impl<T: Float> FusionNetwork<T> {
    pub fn new(c_syn: usize, c_reg: usize, cfg: &FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj_in = Conv2d::new(c_syn, c_reg, 3, 1, linear_init(), &mut rng);
        if cfg.zero_proj_in {
            proj_in.zero_();
        }
        Self {
            proj_in,
            trunk: (0..FUSION_DEPTH)
                .map(|_| ResBlock::new(c_reg, &mut rng))
                .collect(),
            proj_out: Conv2d::new(c_reg, 3, 3, 1, linear_init(), &mut rng),
        }
    }

    /// Copies `proj` into `proj_out` and zeroes `proj_in`.
    pub fn warm_start(&mut self, proj: &Conv2d<T>) -> Result<()> {
        if proj.in_channels() != self.reg_channels() || proj.out_channels() != 3 {
            return Err(shape_err!(
                "projection {} -> {} does not match fusion width {}",
                proj.in_channels(),
                proj.out_channels(),
                self.reg_channels()
            ));
        }
        self.proj_out = proj.clone();
        self.proj_out.renew_ids();
        self.proj_in.zero_();
        Ok(())
    }

    pub fn syn_channels(&self) -> usize {
        self.proj_in.in_channels()
    }

    pub fn reg_channels(&self) -> usize {
        self.proj_in.out_channels()
    }

    /// Output after the merge point, unclipped.
    pub fn decode(&self, merged: &Var<T>) -> Var<T> {
        let h = self.trunk.iter().fold(merged.clone(), |h, b| b.forward(&h));
        self.proj_out.forward(&h)
    }

    /// Unclipped output for `[n, C_reg, H, W]` and `[n, C_syn, H, W]` features.
    pub fn forward_raw(&self, f_reg: &Var<T>, f_syn: &Var<T>) -> Result<Var<T>> {
        let (r, s) = (f_reg.shape(), f_syn.shape());
        if r.len() != 4 || s.len() != 4 || r[0] != s[0] || r[2..] != s[2..] {
            return Err(shape_err!(
                "fusion inputs {r:?} and {s:?} differ in batch or spatial size"
            ));
        }
        if r[1] != self.reg_channels() || s[1] != self.syn_channels() {
            return Err(shape_err!(
                "fusion expects {} / {} channels, got {} / {}",
                self.reg_channels(),
                self.syn_channels(),
                r[1],
                s[1]
            ));
        }
        Ok(self.decode(&self.proj_in.forward(f_syn).add(f_reg)))
    }

    /// `x̂` clipped to `[0, 1]`.
    pub fn forward(&self, f_reg: &Var<T>, f_syn: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_raw(f_reg, f_syn)?.clamp(0.0, 1.0))
    }
}

/// Single-image fusion of `[C, H, W]` feature maps.
pub fn fuse(
    f_reg: &Array<f32>,
    f_syn: &Array<f32>,
    net: &FusionNetwork<f32>,
) -> Result<ImageTensor> {
    if f_reg.ndim() != 3 || f_syn.ndim() != 3 {
        return Err(shape_err!(
            "expected [C, H, W] feature maps, got {:?} and {:?}",
            f_reg.shape(),
            f_syn.shape()
        ));
    }
    let lift = |a: &Array<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(a.shape());
        Var::constant(a.clone().reshape(s))
    };
    let y = ugp_nn::no_grad(|| net.forward(&lift(f_reg), &lift(f_syn)))?;
    let (_, _, h, w) = y.dims4();
    ImageTensor::new(y.value().clone().reshape([3, h, w]))
}

/// Image-domain variant: both images pass through one shared 3x3 lift
/// before the feature pipeline.
#[derive(Clone, Debug)]
pub struct ImageFusion<T: Float> {
    pub lift: Conv2d<T>,
    pub net: FusionNetwork<T>,
}

impl_module!(ImageFusion { lift, net });

impl<T: Float> ImageFusion<T> {
    pub fn new(cfg: &FusionConfig, seed: u64) -> Result<Self> {
        let c = cfg.image_channels;
        if c == 0 {
            return Err(invalid!("image_channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11f7);
        Ok(Self {
            lift: Conv2d::new(3, c, 3, 1, he(), &mut rng),
            net: FusionNetwork::new(c, c, cfg, seed),
        })
    }

    pub fn forward(&self, x_reg: &Var<T>, x_syn: &Var<T>) -> Result<Var<T>> {
        if x_reg.shape() != x_syn.shape() {
            return Err(shape_err!(
                "image shapes {:?} and {:?} differ",
                x_reg.shape(),
                x_syn.shape()
            ));
        }
        if x_reg.shape().len() != 4 || x_reg.shape()[1] != 3 {
            return Err(shape_err!(
                "expected [n, 3, H, W] images, got {:?}",
                x_reg.shape()
            ));
        }
        self.net
            .forward(&self.lift.forward(x_reg), &self.lift.forward(x_syn))
    }
}

pub fn fuse_images(
    x_reg: &ImageTensor,
    x_syn: &ImageTensor,
    net: &ImageFusion<f32>,
) -> Result<ImageTensor> {
    let b =
        |x: &ImageTensor| Var::constant(x.pixels().clone().reshape([1, 3, x.height(), x.width()]));
    let y = ugp_nn::no_grad(|| net.forward(&b(x_reg), &b(x_syn)))?;
    ImageTensor::new(
        y.value()
            .clone()
            .reshape([3, x_reg.height(), x_reg.width()]),
    )
}
