use rand_chacha::ChaCha8Rng;
use ugp_nn::{impl_module, Conv2d, Float, Init, Linear, Var};

use crate::nets::{he, linear_init, lrelu, to_signed};
use crate::synthesis::{LatentCode, SynthesisConfig};

/// Stride-2 convolutions down to 1x1, then one linear layer emitting
/// `out_slots * style_dim` values.
#[derive(Clone, Debug)]
pub struct Map2Style<T: Float> {
    pub convs: Vec<Conv2d<T>>,
    pub linear: Linear<T>,
    slots: usize,
    style_dim: usize,
}

impl_module!(Map2Style { convs, linear });

impl<T: Float> Map2Style<T> {
    pub fn new(
        channels: usize,
        spatial: usize,
        slots: usize,
        style_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = spatial.trailing_zeros() as usize;
        Self {
            convs: (0..n)
                .map(|_| Conv2d::new(channels, channels, 3, 2, he(), rng))
                .collect(),
            linear: Linear::new(channels, slots * style_dim, linear_init(), rng),
            slots,
            style_dim,
        }
    }

    /// `[n, c, s, s] -> [n, slots, style_dim]`
    pub fn forward(&self, f: &Var<T>) -> Var<T> {
        let h = self
            .convs
            .iter()
            .fold(f.clone(), |h, c| lrelu(&c.forward(&h)));
        let (n, c, _, _) = h.dims4();
        self.linear
            .forward(&h.reshape([n, c]))
            .reshape([n, self.slots, self.style_dim])
    }
}

/// Convolutional encoder predicting the spatial base code and, through one
/// shared map2style network, the whole stack of style vectors.
#[derive(Clone, Debug)]
pub struct Encoder<T: Float> {
    pub stem: Conv2d<T>,
    pub down: Vec<Conv2d<T>>,
    pub top: Conv2d<T>,
    pub base_head: Conv2d<T>,
    pub map2style: Map2Style<T>,
}

impl_module!(Encoder {
    stem,
    down,
    top,
    base_head,
    map2style
});

impl<T: Float> Encoder<T> {
    pub fn new(cfg: &SynthesisConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut res = cfg.resolution;
        let stem = Conv2d::new(3, cfg.channels_at(res), 3, 1, he(), rng);
        let mut down = Vec::new();
        while res > cfg.base_res {
            down.push(Conv2d::new(
                cfg.channels_at(res),
                cfg.channels_at(res / 2),
                3,
                1,
                he(),
                rng,
            ));
            res /= 2;
        }
        let cf = cfg.base_channels;
        Self {
            stem,
            down,
            top: Conv2d::new(cf, cf, 3, 1, he(), rng),
            base_head: Conv2d::new(cf, cf, 3, 1, Init::He { gain: 1.0 }, rng),
            map2style: Map2Style::new(cf, cfg.base_res, cfg.num_styles(), cfg.style_dim, rng),
        }
    }

    /// Input in `[0, 1]`, NCHW at the configured resolution.
    pub fn forward(&self, x: &Var<T>) -> LatentCode<T> {
        let mut h = lrelu(&self.stem.forward(&to_signed(x)));
        for conv in &self.down {
            h = lrelu(&conv.forward(&h)).avg_pool2();
        }
        let f = lrelu(&self.top.forward(&h));
        LatentCode {
            base: self.base_head.forward(&f),
            styles: self.map2style.forward(&f),
        }
    }
}
