//! Convolution, linear and style-modulated convolution layers.

use rand::Rng;

use crate::{impl_module, Array, Float, Param, Var};

/// Negative slope of every leaky rectifier in the crate's networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight parameterisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Stored weights ~ N(0, gain²/fan_in); no runtime scaling.
    He { gain: f64 },
    /// Stored weights ~ N(0, 1), multiplied by gain/sqrt(fan_in) at run time
    /// (equalized learning rate).
    Equalized { gain: f64 },
    /// All-zero weights with the He runtime convention.
    Zero,
}

impl Init {
    fn build<T: Float, R: Rng + ?Sized>(
        self,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> (Array<T>, f64) {
        let f = fan_in as f64;
        match self {
            Init::He { gain } => (Array::randn(shape, gain / f.sqrt(), rng), 1.0),
            Init::Equalized { gain } => (Array::randn(shape, 1.0, rng), gain / f.sqrt()),
            Init::Zero => (Array::zeros(shape), 1.0),
        }
    }
}

/// Gain preserving activation variance through a leaky rectifier.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    stride: usize,
    pad: usize,
    scale: f64,
}

impl_module!(Conv2d { weight, bias });

impl<T: Float> Conv2d<T> {
    /// `k x k` convolution with "same" padding.
    pub fn new<R: Rng + ?Sized>(
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, scale) = init.build([co, ci, k, k].to_vec(), ci * k * k, rng);
        Self {
            weight: Param::new(w),
            bias: Some(Param::new(Array::zeros([co]))),
            stride,
            pad: k / 2,
            scale,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value().shape()[2]
    }

    /// Effective (runtime-scaled) weight.
    pub fn effective_weight(&self) -> Var<T> {
        let w = self.weight.var();
        if self.scale == 1.0 {
            w
        } else {
            w.scale(self.scale)
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(|b| b.var());
        x.conv2d_bias(&self.effective_weight(), b.as_ref(), self.stride, self.pad)
    }

    /// Zeroes weight and bias.
    pub fn zero_(&mut self) {
        self.weight.value_mut().data_mut().fill(T::zero());
        if let Some(b) = self.bias.as_mut() {
            b.value_mut().data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    scale: f64,
}

impl_module!(Linear { weight, bias });

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, init: Init, rng: &mut R) -> Self {
        let (w, scale) = init.build([dout, din].to_vec(), din, rng);
        Self {
            weight: Param::new(w),
            bias: Param::new(Array::zeros([dout])),
            scale,
        }
    }

    pub fn with_bias_init(mut self, v: f64) -> Self {
        self.bias.value_mut().data_mut().fill(T::of(v));
        self
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    /// `[n, din] -> [n, dout]`.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let w = self.weight.var();
        let w = if self.scale == 1.0 {
            w
        } else {
            w.scale(self.scale)
        };
        x.matmul(&w.t())
            .add(&self.bias.var().reshape([1, self.out_features()]))
    }
}

/// Convolution whose input channels are scaled per sample by an affine
/// projection of a style vector, optionally followed by weight
/// demodulation (the style-based generator block).
#[derive(Clone, Debug)]
pub struct ModulatedConv2d<T: Float> {
    pub weight: Param<T>,
    pub affine: Linear<T>,
    pub bias: Param<T>,
    demodulate: bool,
    scale: f64,
}

impl_module!(ModulatedConv2d {
    weight,
    affine,
    bias
});

impl<T: Float> ModulatedConv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        ci: usize,
        co: usize,
        k: usize,
        style_dim: usize,
        demodulate: bool,
        rng: &mut R,
    ) -> Self {
        let w = Array::randn([co, ci, k, k], 1.0, rng);
        Self {
            weight: Param::new(w),
            affine: Linear::new(style_dim, ci, Init::Equalized { gain: 1.0 }, rng)
                .with_bias_init(1.0),
            bias: Param::new(Array::zeros([co])),
            demodulate,
            scale: 1.0 / ((ci * k * k) as f64).sqrt(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    /// Per-sample input-channel scales for a `[n, style_dim]` style batch.
    pub fn styles(&self, style: &Var<T>) -> Var<T> {
        self.affine.forward(style)
    }

    pub fn forward(&self, x: &Var<T>, style: &Var<T>) -> Var<T> {
        let (n, ci, _, _) = x.dims4();
        let (co, k) = (self.out_channels(), self.weight.value().shape()[2]);
        let s = self.styles(style);
        let w = self.weight.var().scale(self.scale);
        let y = x.mul(&s.reshape([n, ci, 1, 1])).conv2d(&w, 1, k / 2);
        let y = if self.demodulate {
            // d[n, o] = (sum_{i,k} (w[o,i,k] s[n,i])^2 + eps)^(-1/2)
            let wsq = w
                .sqr()
                .reshape([co, ci, k * k])
                .sum_axis(2)
                .reshape([co, ci]);
            let d = s.sqr().matmul(&wsq.t()).add_scalar(1e-8).powf(-0.5);
            y.mul(&d.reshape([n, co, 1, 1]))
        } else {
            y
        };
        y.add(&self.bias.var().reshape([1, co, 1, 1]))
    }
}
