//! Regression-based restoration with a pluggable backbone contract.
//!
//! Direct backbones are used as they are. Residual backbones are modified
//! in the feature domain: `x_reg = R_mg(R'(x) + R_se(x))`, where `R'(x)` is
//! the backbone's last feature map, `R_se` a structure encoder and `R_mg` a
//! merging network ending in an image projection.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugp_nn::{impl_module, no_grad, Array, Conv2d, Float, Module, Param, Var};

use crate::data::ImageTensor;
use crate::error::{invalid, shape_err, Result, UgpError};
use crate::nets::{he, linear_init, lrelu, ResBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Direct,
    Residual,
}

/// Contract every restoration backbone satisfies: an image output and a
/// last-layer feature map with `feature_channels()` channels at output
/// resolution.
pub trait Backbone<T: Float>: Module<T> {
    fn backbone_id(&self) -> &str;
    fn kind(&self) -> BackboneKind;
    fn feature_channels(&self) -> usize;

    /// Last feature map before the final image projection.
    fn features(&self, x: &Var<T>) -> Var<T>;

    /// Final to-image projection.
    fn projection(&self) -> &Conv2d<T>;

    fn check_input(&self, _h: usize, _w: usize) -> Result<()> {
        Ok(())
    }

    /// Output of the unmodified backbone.
    fn forward(&self, x: &Var<T>) -> Var<T> {
        let y = self.projection().forward(&self.features(x));
        match self.kind() {
            BackboneKind::Direct => y,
            BackboneKind::Residual => y.add(x),
        }
    }
}

/// A constructed backbone behind the adapter contract.
pub type BackboneAdapter<T> = Box<dyn Backbone<T>>;

impl<T: Float> Module<T> for Box<dyn Backbone<T>> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        (**self).params()
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        (**self).params_mut()
    }
}

/// Per-backbone parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneParams {
    pub feature_channels: usize,
    /// Trunk depth for plain-conv backbones.
    pub depth: usize,
}

impl Default for BackboneParams {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            depth: 4,
        }
    }
}

/// Encoder-decoder with skip connections over two scales.
#[derive(Clone, Debug)]
pub struct TinyUNet<T: Float> {
    enc1a: Conv2d<T>,
    enc1b: Conv2d<T>,
    enc2a: Conv2d<T>,
    enc2b: Conv2d<T>,
    mid: Conv2d<T>,
    dec2: Conv2d<T>,
    dec1a: Conv2d<T>,
    dec1b: Conv2d<T>,
    proj: Conv2d<T>,
}

impl_module!(TinyUNet {
    enc1a,
    enc1b,
    enc2a,
    enc2b,
    mid,
    dec2,
    dec1a,
    dec1b,
    proj
});

impl<T: Float> TinyUNet<T> {
    pub fn new(p: &BackboneParams, rng: &mut ChaCha8Rng) -> Self {
        let c = p.feature_channels;
        Self {
            enc1a: Conv2d::new(3, c, 3, 1, he(), rng),
            enc1b: Conv2d::new(c, c, 3, 1, he(), rng),
            enc2a: Conv2d::new(c, 2 * c, 3, 1, he(), rng),
            enc2b: Conv2d::new(2 * c, 2 * c, 3, 1, he(), rng),
            mid: Conv2d::new(2 * c, 2 * c, 3, 1, he(), rng),
            dec2: Conv2d::new(4 * c, 2 * c, 3, 1, he(), rng),
            dec1a: Conv2d::new(3 * c, c, 3, 1, he(), rng),
            dec1b: Conv2d::new(c, c, 3, 1, he(), rng),
            proj: Conv2d::new(c, 3, 3, 1, linear_init(), rng),
        }
    }
}

impl<T: Float> Backbone<T> for TinyUNet<T> {
    fn backbone_id(&self) -> &str {
        "tiny-unet"
    }
    fn kind(&self) -> BackboneKind {
        BackboneKind::Direct
    }
    fn feature_channels(&self) -> usize {
        self.proj.in_channels()
    }
    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
            return Err(shape_err!(
                "tiny-unet needs sides divisible by 4, got {h}x{w}"
            ));
        }
        Ok(())
    }
    fn features(&self, x: &Var<T>) -> Var<T> {
        let e1 = lrelu(&self.enc1b.forward(&lrelu(&self.enc1a.forward(x))));
        let e2 = lrelu(
            &self
                .enc2b
                .forward(&lrelu(&self.enc2a.forward(&e1.avg_pool2()))),
        );
        let m = lrelu(&self.mid.forward(&e2.avg_pool2()));
        let d2 = lrelu(
            &self
                .dec2
                .forward(&Var::concat(&[m.upsample_nearest2(), e2], 1)),
        );
        let d1 = lrelu(
            &self
                .dec1a
                .forward(&Var::concat(&[d2.upsample_nearest2(), e1], 1)),
        );
        lrelu(&self.dec1b.forward(&d1))
    }
    fn projection(&self) -> &Conv2d<T> {
        &self.proj
    }
}

/// Plain convolutional trunk with a global skip from input to output.
#[derive(Clone, Debug)]
pub struct TinyResidual<T: Float> {
    head: Conv2d<T>,
    trunk: Vec<Conv2d<T>>,
    proj: Conv2d<T>,
}

impl_module!(TinyResidual { head, trunk, proj });

impl<T: Float> TinyResidual<T> {
    pub fn new(p: &BackboneParams, rng: &mut ChaCha8Rng) -> Self {
        let c = p.feature_channels;
        Self {
            head: Conv2d::new(3, c, 3, 1, he(), rng),
            trunk: (0..p.depth)
                .map(|_| Conv2d::new(c, c, 3, 1, he(), rng))
                .collect(),
            proj: Conv2d::new(c, 3, 3, 1, linear_init(), rng),
        }
    }
}

impl<T: Float> Backbone<T> for TinyResidual<T> {
    fn backbone_id(&self) -> &str {
        "tiny-residual"
    }
    fn kind(&self) -> BackboneKind {
        BackboneKind::Residual
    }
    fn feature_channels(&self) -> usize {
        self.proj.in_channels()
    }
    fn features(&self, x: &Var<T>) -> Var<T> {
        self.trunk
            .iter()
            .fold(lrelu(&self.head.forward(x)), |h, conv| {
                lrelu(&conv.forward(&h))
            })
    }
    fn projection(&self) -> &Conv2d<T> {
        &self.proj
    }
}

pub type BackboneBuilder<T> =
    Box<dyn Fn(&BackboneParams, &mut ChaCha8Rng) -> Result<BackboneAdapter<T>>>;

/// Backbones constructible by id.
pub struct BackboneRegistry<T: Float> {
    builders: BTreeMap<String, BackboneBuilder<T>>,
}

impl<T: Float> Default for BackboneRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Float> BackboneRegistry<T> {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// `tiny-unet` (direct) and `tiny-residual` (residual).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(
            "tiny-unet",
            Box::new(|p, rng| Ok(Box::new(TinyUNet::new(p, rng)) as BackboneAdapter<T>)),
        )
        .expect("fresh registry");
        r.register(
            "tiny-residual",
            Box::new(|p, rng| Ok(Box::new(TinyResidual::new(p, rng)) as BackboneAdapter<T>)),
        )
        .expect("fresh registry");
        r
    }

    pub fn register(&mut self, id: &str, builder: BackboneBuilder<T>) -> Result<()> {
        if self.builders.contains_key(id) {
            return Err(UgpError::Conflict(format!(
                "backbone `{id}` is already registered"
            )));
        }
        self.builders.insert(id.to_string(), builder);
        Ok(())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        id: &str,
        params: &BackboneParams,
        seed: u64,
    ) -> Result<BackboneAdapter<T>> {
        let builder = self
            .builders
            .get(id)
            .ok_or_else(|| UgpError::NotFound(format!("backbone `{id}`")))?;
        if params.feature_channels == 0 {
            return Err(invalid!("feature_channels must be positive"));
        }
        builder(params, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// `R_se`: three stride-1 convolutions from RGB to `C_reg` channels.
#[derive(Clone, Debug)]
pub struct StructureEncoder<T: Float> {
    pub convs: Vec<Conv2d<T>>,
}

impl_module!(StructureEncoder { convs });

impl<T: Float> StructureEncoder<T> {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            convs: vec![
                Conv2d::new(3, c, 3, 1, he(), rng),
                Conv2d::new(c, c, 3, 1, he(), rng),
                Conv2d::new(c, c, 3, 1, linear_init(), rng),
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels())
    }

    /// Makes the encoder output identically zero.
    pub fn zero_(&mut self) {
        if let Some(last) = self.convs.last_mut() {
            last.zero_();
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let n = self.convs.len();
        self.convs
            .iter()
            .enumerate()
            .fold(x.clone(), |h, (i, conv)| {
                let y = conv.forward(&h);
                if i + 1 < n {
                    lrelu(&y)
                } else {
                    y
                }
            })
    }
}

/// `R_mg`: two residual blocks and a projection to RGB.
#[derive(Clone, Debug)]
pub struct MergingNetwork<T: Float> {
    pub blocks: Vec<ResBlock<T>>,
    pub to_rgb: Conv2d<T>,
}

impl_module!(MergingNetwork { blocks, to_rgb });

impl<T: Float> MergingNetwork<T> {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: (0..2).map(|_| ResBlock::new(c, rng)).collect(),
            to_rgb: Conv2d::new(c, 3, 3, 1, linear_init(), rng),
        }
    }

    /// Identity residual blocks followed by a copy of `proj`, so that the
    /// merged output starts as the backbone's own projection.
    pub fn from_projection(proj: &Conv2d<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut to_rgb = proj.clone();
        to_rgb.renew_ids();
        Self {
            blocks: (0..2)
                .map(|_| ResBlock::new(proj.in_channels(), rng))
                .collect(),
            to_rgb,
        }
    }

    pub fn features(&self, h: &Var<T>) -> Var<T> {
        self.blocks.iter().fold(h.clone(), |h, b| b.forward(&h))
    }
}

#[derive(Clone, Debug)]
pub struct ResidualAdapter<T: Float> {
    pub se: StructureEncoder<T>,
    pub mg: MergingNetwork<T>,
}

impl_module!(ResidualAdapter { se, mg });

/// `x_reg = R_mg(R'(x) + R_se(x))` and the merging network's last feature map.
pub fn residual_forward<T: Float>(
    backbone: &dyn Backbone<T>,
    se: &StructureEncoder<T>,
    mg: &MergingNetwork<T>,
    x: &Var<T>,
) -> Result<(Var<T>, Var<T>)> {
    if se.out_channels() != backbone.feature_channels()
        || mg.to_rgb.in_channels() != backbone.feature_channels()
    {
        return Err(shape_err!(
            "backbone has {} feature channels, structure encoder {}, merging network {}",
            backbone.feature_channels(),
            se.out_channels(),
            mg.to_rgb.in_channels()
        ));
    }
    let sum = backbone.features(x).add(&se.forward(x));
    let f = mg.features(&sum);
    Ok((mg.to_rgb.forward(&f), f))
}

/// Backbone plus, for residual backbones, the optional feature-domain adapter.
pub struct RestorationModule<T: Float> {
    pub backbone: BackboneAdapter<T>,
    pub adapter: Option<ResidualAdapter<T>>,
}

impl_module!(RestorationModule { backbone, adapter });

impl<T: Float> RestorationModule<T> {
    /// The adapter is attached only to residual backbones when `with_adapter`.
    pub fn new(backbone: BackboneAdapter<T>, with_adapter: bool, seed: u64) -> Self {
        let adapter = (with_adapter && backbone.kind() == BackboneKind::Residual).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let se = StructureEncoder::new(backbone.feature_channels(), &mut rng);
            let mg = MergingNetwork::from_projection(backbone.projection(), &mut rng);
            ResidualAdapter { se, mg }
        });
        Self { backbone, adapter }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.feature_channels()
    }

    /// Final projection from `f_reg` to the image.
    pub fn output_projection(&self) -> &Conv2d<T> {
        match &self.adapter {
            Some(a) => &a.mg.to_rgb,
            None => self.backbone.projection(),
        }
    }

    /// Unclipped `x_reg` and `f_reg` for an NCHW batch.
    pub fn forward(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(shape_err!("expected RGB input, got {c} channels"));
        }
        self.backbone.check_input(h, w)?;
        match &self.adapter {
            Some(a) => residual_forward(&*self.backbone, &a.se, &a.mg, x),
            None => {
                let f = self.backbone.features(x);
                let y = self.backbone.projection().forward(&f);
                let y = match self.backbone.kind() {
                    BackboneKind::Direct => y,
                    BackboneKind::Residual => y.add(x),
                };
                Ok((y, f))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestorationOutput {
    pub x_reg: ImageTensor,
    /// `[C_reg, h, w]`
    pub f_reg: Array<f32>,
}

fn single(x: &ImageTensor) -> Var<f32> {
    Var::constant(x.pixels().clone().reshape([1, 3, x.height(), x.width()]))
}

fn output(y: Var<f32>, f: Var<f32>) -> Result<RestorationOutput> {
    let (_, c, h, w) = f.dims4();
    let x_reg = ImageTensor::from_clipped(y.value().clone().reshape([3, h, w]))?;
    Ok(RestorationOutput {
        x_reg,
        f_reg: f.value().clone().reshape([c, h, w]),
    })
}

pub fn restore_direct(x: &ImageTensor, adapter: &dyn Backbone<f32>) -> Result<RestorationOutput> {
    if adapter.kind() != BackboneKind::Direct {
        return Err(invalid!(
            "`{}` is not a direct backbone",
            adapter.backbone_id()
        ));
    }
    adapter.check_input(x.height(), x.width())?;
    no_grad(|| {
        let f = adapter.features(&single(x));
        output(adapter.projection().forward(&f), f)
    })
}

pub fn restore_residual(
    x: &ImageTensor,
    adapter: &dyn Backbone<f32>,
    se: &StructureEncoder<f32>,
    mg: &MergingNetwork<f32>,
) -> Result<RestorationOutput> {
    if adapter.kind() != BackboneKind::Residual {
        return Err(invalid!(
            "`{}` is not a residual backbone",
            adapter.backbone_id()
        ));
    }
    adapter.check_input(x.height(), x.width())?;
    no_grad(|| {
        let (y, f) = residual_forward(adapter, se, mg, &single(x))?;
        output(y, f)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ugp_nn::gradcheck::param_probes;

    struct IdentityBackbone {
        proj: Conv2d<f32>,
    }

    impl Module<f32> for IdentityBackbone {
        fn params(&self) -> Vec<(String, &Param<f32>)> {
            self.proj.params()
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
            self.proj.params_mut()
        }
    }

    impl Backbone<f32> for IdentityBackbone {
        fn backbone_id(&self) -> &str {
            "identity"
        }
        fn kind(&self) -> BackboneKind {
            BackboneKind::Direct
        }
        fn feature_channels(&self) -> usize {
            3
        }
        fn features(&self, x: &Var<f32>) -> Var<f32> {
            x.clone()
        }
        fn projection(&self) -> &Conv2d<f32> {
            &self.proj
        }
    }

    fn identity_builder() -> BackboneBuilder<f32> {
        Box::new(|_, rng| {
            let mut proj = Conv2d::new(3, 3, 1, 1, linear_init(), rng);
            proj.zero_();
            for c in 0..3 {
                proj.weight.value_mut().data_mut()[c * 3 + c] = 1.0;
            }
            Ok(Box::new(IdentityBackbone { proj }) as BackboneAdapter<f32>)
        })
    }

    fn rand_img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array::uniform([3, 64, 64], 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn registry_kinds_conflicts_and_lookup() {
        let mut reg = BackboneRegistry::<f32>::with_builtins();
        let p = BackboneParams::default();
        assert_eq!(
            reg.build("tiny-unet", &p, 0).unwrap().kind(),
            BackboneKind::Direct
        );
        assert_eq!(
            reg.build("tiny-residual", &p, 0).unwrap().kind(),
            BackboneKind::Residual
        );
        assert!(matches!(
            reg.build("nope", &p, 0),
            Err(UgpError::NotFound(_))
        ));
        reg.register("identity", identity_builder()).unwrap();
        assert!(matches!(
            reg.register("identity", identity_builder()),
            Err(UgpError::Conflict(_))
        ));
        assert!(matches!(
            reg.register("tiny-unet", identity_builder()),
            Err(UgpError::Conflict(_))
        ));
        assert_eq!(reg.ids(), ["identity", "tiny-residual", "tiny-unet"]);
    }

    #[test]
    fn builtins_default_to_64_channels_at_full_resolution() {
        let reg = BackboneRegistry::<f32>::with_builtins();
        let x = rand_img(1);
        let unet = reg
            .build("tiny-unet", &BackboneParams::default(), 2)
            .unwrap();
        let out = restore_direct(&x, &*unet).unwrap();
        assert_eq!(out.f_reg.shape(), &[64, 64, 64]);
        assert_eq!((out.x_reg.height(), out.x_reg.width()), (64, 64));
        let again = restore_direct(&x, &*unet).unwrap();
        assert_eq!(out.x_reg, again.x_reg);
        assert_eq!(out.f_reg, again.f_reg);

        let res = reg
            .build("tiny-residual", &BackboneParams::default(), 3)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let se = StructureEncoder::new(64, &mut rng);
        let mg = MergingNetwork::from_projection(res.projection(), &mut rng);
        let out = restore_residual(&x, &*res, &se, &mg).unwrap();
        assert_eq!(out.f_reg.shape(), &[64, 64, 64]);
        assert!(matches!(
            restore_direct(&x, &*res),
            Err(UgpError::InvalidArgument(_))
        ));
        assert!(matches!(
            restore_residual(&x, &*unet, &se, &mg),
            Err(UgpError::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_backbone_passes_input_through() {
        let mut reg = BackboneRegistry::<f32>::empty();
        reg.register("identity", identity_builder()).unwrap();
        let b = reg
            .build("identity", &BackboneParams::default(), 0)
            .unwrap();
        let x = rand_img(5);
        let out = restore_direct(&x, &*b).unwrap();
        assert_eq!(out.x_reg, x);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let reg = BackboneRegistry::<f32>::with_builtins();
        let p = BackboneParams {
            feature_channels: 8,
            depth: 2,
        };
        let res = reg.build("tiny-residual", &p, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let se = StructureEncoder::new(6, &mut rng);
        let mg = MergingNetwork::from_projection(res.projection(), &mut rng);
        assert!(matches!(
            restore_residual(&rand_img(0), &*res, &se, &mg),
            Err(UgpError::Shape(_))
        ));
    }

    #[test]
    fn null_adapter_reproduces_the_backbone() {
        let reg = BackboneRegistry::<f32>::with_builtins();
        let p = BackboneParams {
            feature_channels: 16,
            depth: 3,
        };
        let res = reg.build("tiny-residual", &p, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut se = StructureEncoder::new(16, &mut rng);
        se.zero_();
        let mg = MergingNetwork::from_projection(res.projection(), &mut rng);
        let x = single(&rand_img(11));
        let (y, _) = no_grad(|| residual_forward(&*res, &se, &mg, &x)).unwrap();
        let reference = no_grad(|| res.projection().forward(&res.features(&x)));
        let diff = y
            .value()
            .zip_map(reference.value(), |a, b| (a - b).abs())
            .data()
            .iter()
            .cloned()
            .fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn structure_encoder_gradient_matches_finite_differences() {
        let p = BackboneParams {
            feature_channels: 4,
            depth: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let backbone = TinyResidual::<f64>::new(&p, &mut rng);
        let mg = MergingNetwork::new(4, &mut rng);
        // give the residual blocks non-trivial second convolutions
        let mut mg = mg;
        for b in &mut mg.blocks {
            *b.conv2.weight.value_mut() =
                Array::randn(b.conv2.weight.value().shape().to_vec(), 0.2, &mut rng);
        }
        let mut se = StructureEncoder::<f64>::new(4, &mut rng);
        let x = Var::constant(Array::<f64>::uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng));
        for name in [
            "convs.0.weight",
            "convs.1.weight",
            "convs.2.weight",
            "convs.2.bias",
        ] {
            let probes = param_probes(&mut se, name, &[0, 2, 3], 1e-3, |se| {
                residual_forward(&backbone, se, &mg, &x)
                    .unwrap()
                    .0
                    .sqr()
                    .sum_all()
            });
            for pr in probes {
                assert!(pr.rel_err() < 1e-3, "{name}: {pr:?}");
            }
        }
    }

    #[test]
    fn copied_projection_has_its_own_identity() {
        let reg = BackboneRegistry::<f32>::with_builtins();
        let res = reg
            .build(
                "tiny-residual",
                &BackboneParams {
                    feature_channels: 4,
                    depth: 1,
                },
                0,
            )
            .unwrap();
        let mg =
            MergingNetwork::from_projection(res.projection(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_ne!(mg.to_rgb.weight.id(), res.projection().weight.id());
        assert_eq!(mg.to_rgb.weight.value(), res.projection().weight.value());
    }
}
