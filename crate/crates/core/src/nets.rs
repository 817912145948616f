//! Building blocks shared by the restoration, synthesis and fusion networks.

use rand::Rng;
use ugp_nn::{impl_module, layers::lrelu_gain, Conv2d, Float, Init, Var, LEAKY_SLOPE};

pub(crate) fn he() -> Init {
    Init::He { gain: lrelu_gain() }
}

pub(crate) fn linear_init() -> Init {
    Init::He { gain: 1.0 }
}

pub(crate) fn lrelu<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// `x + conv2(lrelu(conv1(x)))`; the second convolution starts at zero so a
/// fresh block is the identity.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl_module!(ResBlock { conv1, conv2 });

impl<T: Float> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(c, c, 3, 1, he(), rng),
            conv2: Conv2d::new(c, c, 3, 1, Init::Zero, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.add(&self.conv2.forward(&lrelu(&self.conv1.forward(x))))
    }
}

/// `2x - 1`
pub(crate) fn to_signed<T: Float>(x: &Var<T>) -> Var<T> {
    x.scale(2.0).add_scalar(-1.0)
}
