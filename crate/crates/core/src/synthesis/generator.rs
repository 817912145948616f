use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ugp_nn::{
    impl_module, layers::lrelu_gain, Array, Float, Init, Linear, ModulatedConv2d, Param, Var,
    LEAKY_SLOPE,
};

use crate::synthesis::{LatentCode, SynthesisConfig};

fn act<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LEAKY_SLOPE).scale(lrelu_gain())
}

/// Upsample, two modulated convolutions and a toRGB sharing the second
/// convolution's style.
#[derive(Clone, Debug)]
pub struct GenBlock<T: Float> {
    pub conv1: ModulatedConv2d<T>,
    pub conv2: ModulatedConv2d<T>,
    pub to_rgb: ModulatedConv2d<T>,
}

impl_module!(GenBlock {
    conv1,
    conv2,
    to_rgb
});

/// Mapping network and learned constant used only for unconditional
/// sampling; they produce a base code at `base_res` from a latent `z`.
#[derive(Clone, Debug)]
pub struct PriorHead<T: Float> {
    pub mapping: Vec<Linear<T>>,
    pub constant: Param<T>,
    pub coarse1: ModulatedConv2d<T>,
    pub coarse2: ModulatedConv2d<T>,
}

impl_module!(PriorHead {
    mapping,
    constant,
    coarse1,
    coarse2
});

/// Style-modulated convolution pyramid seeded by a spatial base code.
#[derive(Clone, Debug)]
pub struct Generator<T: Float> {
    pub prior: PriorHead<T>,
    pub base_conv: ModulatedConv2d<T>,
    pub base_rgb: ModulatedConv2d<T>,
    pub blocks: Vec<GenBlock<T>>,
    style_dim: usize,
    base_res: usize,
}

impl_module!(Generator {
    prior,
    base_conv,
    base_rgb,
    blocks
});

pub struct GeneratorOutput<T: Float> {
    /// Image in `[-1, 1]` (unclipped).
    pub raw: Var<T>,
    /// Input feature of the final toRGB layer.
    pub f_syn: Var<T>,
    /// Inputs of every toRGB layer, coarse to fine.
    pub rgb_inputs: Vec<Var<T>>,
}

impl<T: Float> Generator<T> {
    pub fn new(cfg: &SynthesisConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.style_dim;
        let cf = cfg.base_channels;
        let q = cfg.base_res / 2;
        let prior = PriorHead {
            mapping: (0..cfg.mapping_layers)
                .map(|_| Linear::new(d, d, Init::Equalized { gain: lrelu_gain() }, rng))
                .collect(),
            constant: Param::new(Array::randn([1, cf, q.max(1), q.max(1)], 1.0, rng)),
            coarse1: ModulatedConv2d::new(cf, cf, 3, d, true, rng),
            coarse2: ModulatedConv2d::new(cf, cf, 3, d, true, rng),
        };
        let mut blocks = Vec::new();
        let mut res = cfg.base_res;
        while res < cfg.resolution {
            let (ci, co) = (cfg.channels_at(res), cfg.channels_at(res * 2));
            blocks.push(GenBlock {
                conv1: ModulatedConv2d::new(ci, co, 3, d, true, rng),
                conv2: ModulatedConv2d::new(co, co, 3, d, true, rng),
                to_rgb: ModulatedConv2d::new(co, 3, 1, d, false, rng),
            });
            res *= 2;
        }
        Self {
            prior,
            base_conv: ModulatedConv2d::new(cf, cf, 3, d, true, rng),
            base_rgb: ModulatedConv2d::new(cf, 3, 1, d, false, rng),
            blocks,
            style_dim: d,
            base_res: cfg.base_res,
        }
    }

    pub fn num_styles(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    /// Generates from a base code and `[n, L, D]` styles.
    pub fn forward(&self, code: &LatentCode<T>) -> GeneratorOutput<T> {
        let n = code.styles.shape()[0];
        let d = self.style_dim;
        let slot = |i: usize| code.styles.narrow(1, i, 1).reshape([n, d]);
        let s0 = slot(0);
        let mut x = act(&self.base_conv.forward(&code.base, &s0));
        let mut rgb_inputs = vec![x.clone()];
        let mut rgb = self.base_rgb.forward(&x, &s0);
        for (b, block) in self.blocks.iter().enumerate() {
            let (sa, sb) = (slot(1 + 2 * b), slot(2 + 2 * b));
            x = act(&block.conv1.forward(&x.upsample_nearest2(), &sa));
            x = act(&block.conv2.forward(&x, &sb));
            rgb_inputs.push(x.clone());
            rgb = rgb.upsample_bilinear2().add(&block.to_rgb.forward(&x, &sb));
        }
        GeneratorOutput {
            raw: rgb,
            f_syn: x,
            rgb_inputs,
        }
    }

    /// Latent `z: [n, D]` to an intermediate style `w: [n, D]`.
    pub fn map(&self, z: &Var<T>) -> Var<T> {
        let norm = z.sqr().mean_axis(1).add_scalar(1e-8).powf(-0.5);
        let h = z.mul(&norm);
        self.prior
            .mapping
            .iter()
            .fold(h, |h, l| act(&l.forward(&h)))
    }

    /// Unconditional code: mapped style broadcast to every slot, base code
    /// grown from the learned constant.
    pub fn prior_code(&self, z: &Var<T>) -> LatentCode<T> {
        let w = self.map(z);
        let n = w.shape()[0];
        let c = self.prior.constant.value().shape().to_vec();
        let k = Var::constant(Array::ones([n, 1, 1, 1]));
        let mut h = self.prior.constant.var().mul(&k);
        h = act(&self.prior.coarse1.forward(&h, &w));
        if c[2] < self.base_res {
            h = h.upsample_nearest2();
        }
        let base = act(&self.prior.coarse2.forward(&h, &w));
        LatentCode::broadcast(base, &w, self.num_styles())
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Var<T> {
        Var::constant(Array::randn([n, self.style_dim], 1.0, rng))
    }
}
