use rand_chacha::ChaCha8Rng;
use ugp_nn::{impl_module, layers::lrelu_gain, Conv2d, Float, Init, Linear, Var};

use crate::nets::{lrelu, to_signed};
use crate::synthesis::SynthesisConfig;

fn eq() -> Init {
    Init::Equalized { gain: lrelu_gain() }
}

#[derive(Clone, Debug)]
pub struct DiscBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl_module!(DiscBlock { conv1, conv2 });

/// Mirror of the generator pyramid down to 4x4, then two dense layers to a
/// single logit.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Float> {
    pub from_rgb: Conv2d<T>,
    pub blocks: Vec<DiscBlock<T>>,
    pub top: Conv2d<T>,
    pub fc: Linear<T>,
    pub out: Linear<T>,
}

impl_module!(Discriminator {
    from_rgb,
    blocks,
    top,
    fc,
    out
});

impl<T: Float> Discriminator<T> {
    pub fn new(cfg: &SynthesisConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut res = cfg.resolution;
        let from_rgb = Conv2d::new(3, cfg.channels_at(res), 1, 1, eq(), rng);
        let mut blocks = Vec::new();
        while res > 4 {
            let (ci, co) = (cfg.channels_at(res), cfg.channels_at(res / 2));
            blocks.push(DiscBlock {
                conv1: Conv2d::new(ci, ci, 3, 1, eq(), rng),
                conv2: Conv2d::new(ci, co, 3, 1, eq(), rng),
            });
            res /= 2;
        }
        let c = cfg.channels_at(res);
        let flat = c * res * res;
        Self {
            from_rgb,
            blocks,
            top: Conv2d::new(c, c, 3, 1, eq(), rng),
            fc: Linear::new(flat, c, eq(), rng),
            out: Linear::new(c, 1, Init::Equalized { gain: 1.0 }, rng),
        }
    }

    /// `[n, 3, h, w]` in `[0, 1]` to `[n, 1]` logits.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let mut h = lrelu(&self.from_rgb.forward(&to_signed(x)));
        for b in &self.blocks {
            h = lrelu(&b.conv2.forward(&lrelu(&b.conv1.forward(&h)))).avg_pool2();
        }
        h = lrelu(&self.top.forward(&h));
        let (n, c, hh, ww) = h.dims4();
        self.out
            .forward(&lrelu(&self.fc.forward(&h.reshape([n, c * hh * ww]))))
    }
}
