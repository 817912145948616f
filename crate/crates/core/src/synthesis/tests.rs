use super::*;
use rand::Rng;
use ugp_nn::gradcheck::input_probes;
use ugp_nn::Module;

fn small() -> SynthesisConfig {
    SynthesisConfig {
        resolution: 16,
        base_res: 4,
        channels: vec![8, 6],
        base_channels: 8,
        style_dim: 6,
        mapping_layers: 2,
    }
}

fn image<T: Float>(n: usize, r: usize, seed: u64) -> Var<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Var::constant(Array::uniform([n, 3, r, r], 0.0, 1.0, &mut rng))
}

#[test]
fn slot_count_and_shapes_at_default_scale() {
    let cfg = SynthesisConfig::default();
    assert_eq!(cfg.num_styles(), 7);
    let m = SynthesisModule::<f32>::new(&cfg, 1).unwrap();
    let x = image::<f32>(1, 64, 2);
    let code = ugp_nn::no_grad(|| m.encode(&x)).unwrap();
    assert_eq!(code.base.shape(), &[1, 256, 8, 8]);
    assert_eq!(code.styles.shape(), &[1, 7, 128]);
    let (x_syn, f_syn) = ugp_nn::no_grad(|| m.generate(&code)).unwrap();
    assert_eq!(x_syn.shape(), &[1, 3, 64, 64]);
    assert_eq!(f_syn.shape(), &[1, 64, 64, 64]);
    let c = Critic::<f32>::new(&cfg, 3).unwrap();
    let logit = ugp_nn::no_grad(|| c.discriminate(&x)).unwrap();
    assert_eq!(logit.shape(), &[1]);
    assert!(logit.item().is_finite());
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let m = SynthesisModule::<f32>::new(&small(), 0).unwrap();
    let c = Critic::<f32>::new(&small(), 0).unwrap();
    let x = image::<f32>(1, 8, 0);
    assert!(matches!(m.encode(&x), Err(UgpError::Shape(_))));
    assert!(matches!(c.discriminate(&x), Err(UgpError::Shape(_))));
}

#[test]
fn nonfinite_code_is_rejected() {
    let m = SynthesisModule::<f32>::new(&small(), 0).unwrap();
    let code = m.encode(&image(1, 16, 1)).unwrap();
    let mut styles = code.styles.value().clone();
    styles.data_mut()[3] = f32::NAN;
    let bad = LatentCode {
        base: code.base.clone(),
        styles: Var::constant(styles),
    };
    assert!(matches!(m.generate(&bad), Err(UgpError::Numeric(_))));
}

#[test]
fn broadcast_code_equals_explicit_repeat() {
    let cfg = small();
    let m = SynthesisModule::<f32>::new(&cfg, 4).unwrap();
    let code = m.encode(&image(2, 16, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = Array::<f32>::randn([2, cfg.style_dim], 1.0, &mut rng);
    let l = cfg.num_styles();
    let mut rep = Array::zeros([2, l, cfg.style_dim]);
    for b in 0..2 {
        for s in 0..l {
            for d in 0..cfg.style_dim {
                rep.data_mut()[(b * l + s) * cfg.style_dim + d] = w.data()[b * cfg.style_dim + d];
            }
        }
    }
    let a = m
        .generate(&LatentCode {
            base: code.base.clone(),
            styles: Var::constant(rep),
        })
        .unwrap();
    let b = m
        .generate(&LatentCode::broadcast(
            code.base.clone(),
            &Var::constant(w),
            l,
        ))
        .unwrap();
    assert_eq!(a.0.value(), b.0.value());
    assert_eq!(a.1.value(), b.1.value());
}

#[test]
fn f_syn_is_the_last_to_rgb_input() {
    let cfg = small();
    let m = SynthesisModule::<f64>::new(&cfg, 7).unwrap();
    let code = m.encode(&image(1, 16, 8)).unwrap();
    let out = m.generate_raw(&code).unwrap();
    assert_eq!(out.f_syn.value(), out.rgb_inputs.last().unwrap().value());
    assert_eq!(out.f_syn.shape(), &[1, cfg.syn_channels(), 16, 16]);
    // rebuild the skip sum from the recorded toRGB inputs
    let g = &m.generator;
    let slot = |i: usize| code.styles.narrow(1, i, 1).reshape([1, cfg.style_dim]);
    let mut rgb = g.base_rgb.forward(&out.rgb_inputs[0], &slot(0));
    for (b, block) in g.blocks.iter().enumerate() {
        rgb = rgb.upsample_bilinear2().add(
            &block
                .to_rgb
                .forward(&out.rgb_inputs[b + 1], &slot(2 + 2 * b)),
        );
    }
    assert_eq!(rgb.value(), out.raw.value());
}

#[test]
fn style_gradient_matches_finite_differences() {
    let cfg = small();
    let m = SynthesisModule::<f64>::new(&cfg, 9).unwrap();
    let code = m.encode(&image(1, 16, 10)).unwrap();
    let styles = code.styles.value().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let idx: Vec<usize> = (0..10).map(|_| rng.random_range(0..styles.len())).collect();
    let probes = input_probes(&styles, &idx, 1e-5, |s| {
        let c = LatentCode {
            base: code.base.clone(),
            styles: s.clone(),
        };
        m.generate(&c).unwrap().0.sqr().sum_all()
    });
    for p in probes {
        assert!(p.rel_err() < 1e-3, "{p:?}");
    }
}

#[test]
fn critic_input_gradient_is_nonzero() {
    let c = Critic::<f64>::new(&small(), 12).unwrap();
    let x = Var::leaf(image::<f64>(1, 16, 13).value().clone(), true);
    let g = c.discriminate(&x).unwrap().sum_all().backward();
    let norm: f64 = g
        .wrt(&x)
        .unwrap()
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    assert!(norm > 0.0);
    let again = c.discriminate(&x).unwrap();
    assert_eq!(again.item(), c.discriminate(&x).unwrap().item());
}

#[test]
fn synthesize_is_encode_then_generate() {
    let m = SynthesisModule::<f32>::new(&small(), 14).unwrap();
    let x = image::<f32>(2, 16, 15);
    let (a, fa) = m.synthesize(&x).unwrap();
    let (b, fb) = m.generate(&m.encode(&x).unwrap()).unwrap();
    assert_eq!(a.value(), b.value());
    assert_eq!(fa.value(), fb.value());
    assert!(a.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
    let img = ImageTensor::from_clipped(x.value().slice0(0, 1).reshape([3, 16, 16])).unwrap();
    let out = m.synthesize_images(&[&img]).unwrap();
    assert_eq!(out[0].f_syn.shape(), &[6, 16, 16]);
    assert_eq!(out[0].x_syn.height(), 16);
}

fn map2style_params<T: Float>(m: &SynthesisModule<T>) -> Vec<String> {
    m.params()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.contains("map2style"))
        .collect()
}

#[test]
fn single_map2style_shared_across_slots() {
    for res in [16, 32] {
        let cfg = SynthesisConfig {
            resolution: res,
            channels: vec![8; (res / 4).trailing_zeros() as usize],
            ..small()
        };
        let m = SynthesisModule::<f32>::new(&cfg, 0).unwrap();
        let names = map2style_params(&m);
        // two stride-2 convs (4 -> 1) and one linear
        assert_eq!(names.len(), 2 * 2 + 2, "{names:?}");
        assert_eq!(
            m.encoder.map2style.linear.out_features(),
            cfg.num_styles() * cfg.style_dim
        );
    }
}

#[test]
fn style_branch_is_about_one_slot_share_of_per_slot_design() {
    let cfg = SynthesisConfig::default();
    let l = cfg.num_styles();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shared = Map2Style::<f32>::new(cfg.base_channels, cfg.base_res, l, cfg.style_dim, &mut rng)
        .param_count();
    let one_slot =
        Map2Style::<f32>::new(cfg.base_channels, cfg.base_res, 1, cfg.style_dim, &mut rng)
            .param_count();
    // conv weights + biases of three 3x3 stride-2 layers, plus the L*D linear head
    let c = cfg.base_channels;
    let conv = 3 * (c * c * 9 + c);
    assert_eq!(shared, conv + c * l * cfg.style_dim + l * cfg.style_dim);
    let ratio = shared as f64 / (l * one_slot) as f64;
    assert!(
        ratio * l as f64 >= 1.0 && ratio * (l as f64) < 1.25,
        "ratio {ratio}"
    );
}

#[test]
fn prior_sampling_shapes() {
    let cfg = small();
    let m = SynthesisModule::<f32>::new(&cfg, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z = m.generator.sample_z(3, &mut rng);
    let (x, f) = m.sample(&z).unwrap();
    assert_eq!(x.shape(), &[3, 3, 16, 16]);
    assert_eq!(f.shape()[1], 6);
    let code = m.generator.prior_code(&z);
    assert_eq!(code.base.shape(), &[3, 8, 4, 4]);
}

#[test]
fn config_validation() {
    assert!(SynthesisConfig::default().validate().is_ok());
    assert!(SynthesisConfig {
        channels: vec![8],
        ..small()
    }
    .validate()
    .is_err());
    assert!(SynthesisConfig {
        base_res: 6,
        ..small()
    }
    .validate()
    .is_err());
    let meta = serde_json::to_value(SynthesisConfig::default().meta()).unwrap();
    assert_eq!(meta["L"], 7);
    assert_eq!(meta["D"], 128);
}
