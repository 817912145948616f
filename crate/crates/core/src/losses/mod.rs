//! Training objectives: L1, perceptual, adversarial and contextual terms and
//! their weighted compositions.

mod contextual;
mod extractor;

use serde::{Deserialize, Serialize};
use ugp_nn::{Float, Var};

pub use contextual::{contextual_patch, ContextualConfig};
pub use extractor::{unit_normalize, ExtractorConfig, ExtractorStage, PerceptualExtractor};

use crate::data::ImageTensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_per: f64,
    pub lambda_adv: f64,
    pub lambda_cf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_per: 1.0,
            lambda_adv: 0.1,
            lambda_cf: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_per, self.lambda_adv, self.lambda_cf]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(invalid!("loss weights must be non-negative: {self:?}"));
        }
        Ok(())
    }
}

fn same_shape<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn l1_var<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape(a, b)?;
    Ok(a.sub(b).abs().mean_all())
}

/// Sum over stages of the position-averaged squared distance between
/// channel-normalized features.
pub fn perceptual_var<T: Float>(
    a: &Var<T>,
    b: &Var<T>,
    ext: &PerceptualExtractor<T>,
) -> Result<Var<T>> {
    same_shape(a, b)?;
    let fa = ext.features(a);
    let fb = ext.features(b);
    let mut total: Option<Var<T>> = None;
    for ((x, y), stage) in fa.iter().zip(&fb).zip(&ext.stages) {
        let (x, y) = if stage.normalize {
            (unit_normalize(x), unit_normalize(y))
        } else {
            (x.clone(), y.clone())
        };
        let term = x.sub(&y).sqr().sum_axis(1).mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.ok_or_else(|| invalid!("extractor has no stages"))
}

pub fn adv_generator_var<T: Float>(fake_logits: &Var<T>) -> Result<Var<T>> {
    if fake_logits.value().is_empty() {
        return Err(invalid!("no logits"));
    }
    Ok(fake_logits.neg().softplus().mean_all())
}

pub fn adv_discriminator_var<T: Float>(
    real_logits: &Var<T>,
    fake_logits: &Var<T>,
) -> Result<Var<T>> {
    if real_logits.value().is_empty() || fake_logits.value().is_empty() {
        return Err(invalid!("no logits"));
    }
    Ok(real_logits
        .neg()
        .softplus()
        .mean_all()
        .add(&fake_logits.softplus().mean_all()))
}

fn image_var(img: &ImageTensor) -> Var<f64> {
    let (h, w) = (img.height(), img.width());
    Var::constant(img.pixels().cast::<f64>().reshape([1, 3, h, w]))
}

pub fn l1(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(l1_var(&image_var(a), &image_var(b))?.item())
}

pub fn perceptual(a: &ImageTensor, b: &ImageTensor, ext: &PerceptualExtractor<f64>) -> Result<f64> {
    Ok(perceptual_var(&image_var(a), &image_var(b), ext)?.item())
}

fn logits(v: &[f64]) -> Var<f64> {
    Var::constant(ugp_nn::Array::from_vec([v.len()], v.to_vec()))
}

pub fn adv_generator(fake_logits: &[f64]) -> Result<f64> {
    Ok(adv_generator_var(&logits(fake_logits))?.item())
}

pub fn adv_discriminator(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    Ok(adv_discriminator_var(&logits(real_logits), &logits(fake_logits))?.item())
}

/// A composite objective and the unweighted values of its parts.
pub struct LossParts<T: Float> {
    pub total: Var<T>,
    pub l1: f64,
    pub per: f64,
    pub adv: f64,
    pub cf: f64,
}

fn weighted<T: Float>(base: &Var<T>, term: &Var<T>, w: f64) -> Var<T> {
    if w == 0.0 {
        base.clone()
    } else {
        base.add(&term.scale(w))
    }
}

/// `L1 + lambda_per * L_per + lambda_adv * L_adv` on the generator side.
pub fn loss_syn<T: Float>(
    x_syn: &Var<T>,
    gt: &Var<T>,
    fake_logits: &Var<T>,
    w: &LossWeights,
    ext: &PerceptualExtractor<T>,
) -> Result<LossParts<T>> {
    w.validate()?;
    let l1 = l1_var(x_syn, gt)?;
    let per = perceptual_var(x_syn, gt, ext)?;
    let adv = adv_generator_var(fake_logits)?;
    let total = weighted(&weighted(&l1, &per, w.lambda_per), &adv, w.lambda_adv);
    Ok(LossParts {
        l1: l1.item().f64(),
        per: per.item().f64(),
        adv: adv.item().f64(),
        cf: 0.0,
        total,
    })
}

/// `L1 + lambda_per * L_per + lambda_cf * L_cf`, with the contextual term on
/// extractor features of the fused output against the synthesized image.
pub fn loss_fusion<T: Float>(
    x_hat: &Var<T>,
    gt: &Var<T>,
    feat_hat: &Var<T>,
    feat_syn: &Var<T>,
    w: &LossWeights,
    ext: &PerceptualExtractor<T>,
    cx: &ContextualConfig,
) -> Result<LossParts<T>> {
    w.validate()?;
    let l1 = l1_var(x_hat, gt)?;
    let per = perceptual_var(x_hat, gt, ext)?;
    let cf = contextual_patch(feat_hat, feat_syn, cx.radius, cx.bandwidth, cx.eps)?;
    let total = weighted(&weighted(&l1, &per, w.lambda_per), &cf, w.lambda_cf);
    Ok(LossParts {
        l1: l1.item().f64(),
        per: per.item().f64(),
        adv: 0.0,
        cf: cf.item().f64(),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ugp_nn::gradcheck::input_probes;
    use ugp_nn::Array;

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array::uniform([3, h, w], 0.0, 1.0, rng)).unwrap()
    }

    fn small_ext() -> PerceptualExtractor<f64> {
        PerceptualExtractor::new(&ExtractorConfig {
            channels: vec![4, 6],
            strides: vec![1, 2],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn l1_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_img(&mut rng, 5, 6);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        let lo = ImageTensor::filled(4, 4, 0.2);
        let hi = ImageTensor::filled(4, 4, 0.3);
        assert!((l1(&lo, &hi).unwrap() - 0.1).abs() < 1e-7);
        let b = rand_img(&mut rng, 5, 6);
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    acc += (a.at(c, y, x) as f64 - b.at(c, y, x) as f64).abs();
                }
            }
        }
        assert!((l1(&a, &b).unwrap() - acc / 90.0).abs() <= 1e-7);
        assert!(l1(&a, &lo).is_err());
    }

    #[test]
    fn perceptual_identity_stage_by_hand() {
        let a = ImageTensor::new(Array::from_vec(
            [3, 1, 2],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        ))
        .unwrap();
        let b = ImageTensor::new(Array::from_vec(
            [3, 1, 2],
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        ))
        .unwrap();
        // position 0: (1,0,0) vs (0,1,0) -> |diff|^2 = 2
        // position 1: (0,1,1)/sqrt2 vs (0,1,0) -> (0, 1/sqrt2 - 1, 1/sqrt2)
        let p1 = (0.5f64.sqrt() - 1.0).powi(2) + 0.5;
        let want = (2.0 + p1) / 2.0;
        let got = perceptual(&a, &b, &PerceptualExtractor::identity(1)).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn perceptual_zero_on_equal_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ext = small_ext();
        let (a, b) = (rand_img(&mut rng, 8, 8), rand_img(&mut rng, 8, 8));
        assert!(perceptual(&a, &a, &ext).unwrap().abs() < 1e-15);
        let (ab, ba) = (
            perceptual(&a, &b, &ext).unwrap(),
            perceptual(&b, &a, &ext).unwrap(),
        );
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn extractor_weights_are_frozen_and_seeded() {
        let ext = small_ext();
        use ugp_nn::Module;
        assert!(ext.params().iter().all(|(_, p)| !p.trainable()));
        let again = small_ext();
        assert_eq!(ext.state_dict(), again.state_dict());
    }

    #[test]
    fn adversarial_examples() {
        assert!((adv_generator(&[0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(adv_generator(&[20.0]).unwrap() <= 1e-8 + 2.1e-9);
        assert!((adv_generator(&[-20.0]).unwrap() - 20.0).abs() < 1e-8);
        assert!((adv_discriminator(&[0.0], &[0.0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(adv_discriminator(&[20.0], &[-20.0]).unwrap() <= 2e-8);
        assert!(adv_generator(&[]).is_err());
        assert!(adv_discriminator(&[1.0], &[]).is_err());
    }

    #[test]
    fn discriminator_gradient_signs() {
        let real = Var::leaf(Array::<f64>::from_vec([3], vec![-1.0, 0.0, 2.0]), true);
        let fake = Var::leaf(Array::<f64>::from_vec([3], vec![-2.0, 0.5, 1.0]), true);
        let g = adv_discriminator_var(&real, &fake).unwrap().backward();
        // descending the loss raises real logits and lowers fake ones
        assert!(g.wrt(&real).unwrap().data().iter().all(|&v| v < 0.0));
        assert!(g.wrt(&fake).unwrap().data().iter().all(|&v| v > 0.0));
        let x = Array::from_vec([3], vec![-1.0, 0.0, 2.0]);
        let fk = Var::constant(fake.value().clone());
        for p in input_probes(&x, &[0, 1, 2], 1e-6, |r| {
            adv_discriminator_var(r, &fk).unwrap()
        }) {
            assert!(p.rel_err() < 1e-6);
            assert_eq!(p.analytic.signum(), p.numeric.signum());
        }
    }

    #[test]
    fn composite_degeneracies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ext = small_ext();
        let x = Var::constant(Array::<f64>::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let gt = Var::constant(Array::<f64>::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let logit = Var::constant(Array::<f64>::zeros([1, 1]));
        let w = LossWeights {
            lambda_per: 0.0,
            lambda_adv: 0.0,
            lambda_cf: 0.0,
        };
        let s = loss_syn(&x, &gt, &logit, &w, &ext).unwrap();
        assert_eq!(s.total.item(), l1_var(&x, &gt).unwrap().item());
        let w = LossWeights {
            lambda_per: 1.0,
            lambda_adv: 1.0,
            lambda_cf: 0.0,
        };
        let s = loss_syn(&gt, &gt, &logit, &w, &ext).unwrap();
        assert!((s.total.item() - 2f64.ln()).abs() < 1e-12);
        let f = ext.stage(&gt, 1).unwrap();
        let fz = loss_fusion(
            &gt,
            &gt,
            &f,
            &f,
            &LossWeights::default(),
            &ext,
            &ContextualConfig {
                radius: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fz.total.item().abs() < 1e-12);
        assert!(loss_syn(
            &x,
            &gt,
            &logit,
            &LossWeights {
                lambda_per: -1.0,
                ..Default::default()
            },
            &ext
        )
        .is_err());
    }

    #[test]
    fn composites_recompose_from_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ext = small_ext();
        let cx = ContextualConfig::default();
        for _ in 0..10 {
            let x = Var::constant(Array::<f64>::uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng));
            let gt = Var::constant(Array::<f64>::uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng));
            let syn = Var::constant(Array::<f64>::uniform([2, 3, 8, 8], 0.0, 1.0, &mut rng));
            let logits = Var::constant(Array::<f64>::randn([2, 1], 2.0, &mut rng));
            let w = LossWeights {
                lambda_per: rand::Rng::random_range(&mut rng, 0.0..2.0),
                lambda_adv: rand::Rng::random_range(&mut rng, 0.0..2.0),
                lambda_cf: rand::Rng::random_range(&mut rng, 0.0..2.0),
            };
            let parts = [
                l1_var(&x, &gt).unwrap().item(),
                perceptual_var(&x, &gt, &ext).unwrap().item(),
                adv_generator_var(&logits).unwrap().item(),
            ];
            let s = loss_syn(&x, &gt, &logits, &w, &ext).unwrap();
            let manual = parts[0] + w.lambda_per * parts[1] + w.lambda_adv * parts[2];
            assert!((s.total.item() - manual).abs() <= 1e-7);

            let (fx, fs) = (
                ext.stage(&x, cx.stage).unwrap(),
                ext.stage(&syn, cx.stage).unwrap(),
            );
            let cf = contextual_patch(&fx, &fs, cx.radius, cx.bandwidth, cx.eps)
                .unwrap()
                .item();
            let f = loss_fusion(&x, &gt, &fx, &fs, &w, &ext, &cx).unwrap();
            let manual = parts[0] + w.lambda_per * parts[1] + w.lambda_cf * cf;
            assert!((f.total.item() - manual).abs() <= 1e-7);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ext = small_ext();
        let x = Array::<f64>::uniform([1, 3, 6, 6], 0.1, 0.9, &mut rng);
        let gt = Var::constant(Array::<f64>::uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng));
        let idx = [0, 17, 40, 71, 100];
        let check = |f: &dyn Fn(&Var<f64>) -> Var<f64>| {
            for p in input_probes(&x, &idx, 1e-6, f) {
                assert!(p.rel_err() < 1e-3, "{p:?}");
            }
        };
        check(&|v| l1_var(v, &gt).unwrap());
        check(&|v| perceptual_var(v, &gt, &ext).unwrap());
        let lx = Array::<f64>::randn([5], 2.0, &mut rng);
        for p in input_probes(&lx, &[0, 1, 2, 3, 4], 1e-6, |v| {
            adv_generator_var(v).unwrap()
        }) {
            assert!(p.rel_err() < 1e-3, "{p:?}");
        }
    }
}
