use acfseg::data::synthetic::{generate, SyntheticSpec};
use acfseg::data::collate;
use acfseg::nn::Session;
use acfseg::{AcfVariant, Model, NetworkConfig, Tensor, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VARIANTS: [AcfVariant; 4] = [AcfVariant::None, AcfVariant::CenterOnly, AcfVariant::Sum, AcfVariant::Concat];

fn small(variant: AcfVariant) -> NetworkConfig {
    NetworkConfig {
        variant,
        base_channels: 4,
        reduced_channels: 6,
        head_channels: 6,
        ..Default::default()
    }
}

fn model(variant: AcfVariant, seed: u64) -> Model {
    Model::new(small(variant), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&[b, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn outputs_are_finite_and_input_sized() {
    for v in VARIANTS {
        for aspp in [false, true] {
            let mut cfg = small(v);
            cfg.use_aspp = aspp;
            cfg.aspp_channels = 5;
            let mut m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let x = image(2, 56, 64, 2);
            let out = m.infer(&x).unwrap();
            let logits = [Some(&out.aux_logits), Some(&out.coarse_logits), out.fine_logits.as_ref()];
            for t in logits.into_iter().flatten() {
                assert_eq!(t.shape(), &[2, 4, 56, 64], "{v:?}");
                assert!(t.is_finite(), "{v:?} aspp={aspp}");
            }
            assert_eq!(out.fine_logits.is_some(), v.has_fine_head());

            let mut s = Session::train(&mut m.params);
            let xv = s.g.constant(x);
            let fv = m.network.forward(&mut s, xv).unwrap();
            for var in [Some(fv.aux), Some(fv.coarse), fv.fine].into_iter().flatten() {
                assert!(s.g.value(var).is_finite(), "{v:?} train mode");
            }
        }
    }
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    for v in VARIANTS {
        let m = model(v, 3);
        let x = image(1, 32, 32, 4);
        let (a, b) = (m.infer(&x).unwrap(), m.infer(&x).unwrap());
        assert_eq!(a.coarse_logits, b.coarse_logits);
        assert_eq!(a.fine_logits, b.fine_logits);
        assert_eq!(model(v, 3).infer(&x).unwrap().coarse_logits, a.coarse_logits);
    }
}

#[test]
fn baseline_is_a_parameter_subset_of_sum() {
    let sum = model(AcfVariant::Sum, 5);
    let mut base = model(AcfVariant::None, 6);
    let copied = base.params.copy_shared_from(&sum.params);
    assert_eq!(copied, base.params.len() + base.params.all_stats().count());
    for (name, _) in base.params.params() {
        assert!(sum.params.get(name).is_some(), "{name} missing from the sum model");
    }
    assert!(sum.params.len() > base.params.len());
    let x = image(2, 16, 24, 7);
    assert_eq!(base.infer(&x).unwrap().coarse_logits, sum.infer(&x).unwrap().coarse_logits);
}

#[test]
fn every_parameter_receives_gradient() {
    let spec = SyntheticSpec { num_train: 2, num_val: 0, image_size: 32, ..Default::default() };
    let (data, _) = generate(&spec).unwrap();
    let (images, labels) = collate(&data).unwrap();
    for v in [AcfVariant::CenterOnly, AcfVariant::Sum, AcfVariant::Concat] {
        let mut cfg = TrainConfig { network: small(v), batch_size: 2, max_iter: 1, ..Default::default() };
        cfg.augment.crop = 32;
        let mut t = Trainer::new(cfg, data.clone()).unwrap();
        t.step_on(&images, &labels).unwrap();
        for (name, p) in t.model.params.params() {
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{v:?}: `{name}` got no gradient");
        }
    }
}

/// Coarse logits see about 243 pixels, so on a 256×256 input a change in one
/// corner cannot reach the coarse logits in the opposite corner. The class
/// centers are image-wide averages, so the fine logits there do move.
#[test]
fn fine_head_sees_beyond_the_backbone_receptive_field() {
    let m = model(AcfVariant::Sum, 8);
    let x = image(1, 256, 256, 9);
    let mut y = x.clone();
    for c in 0..3 {
        for r in 0..4 {
            for q in 0..4 {
                y.data_mut()[(c * 256 + r) * 256 + q] += 5.0;
            }
        }
    }
    let (a, b) = (m.infer(&x).unwrap(), m.infer(&y).unwrap());
    let far = |t: &Tensor| -> Vec<f32> { (0..4).map(|k| t.data()[k * 256 * 256 + 256 * 256 - 1]).collect() };
    let near = |t: &Tensor| -> Vec<f32> { (0..4).map(|k| t.data()[k * 256 * 256]).collect() };
    assert_ne!(near(&a.coarse_logits), near(&b.coarse_logits));
    assert_eq!(far(&a.coarse_logits), far(&b.coarse_logits));
    let (fa, fb) = (a.fine_logits.unwrap(), b.fine_logits.unwrap());
    assert_ne!(far(&fa), far(&fb));
}
