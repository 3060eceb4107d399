use acfseg::acf::{class_attention_sum, class_center, CENTER_EPS};
use acfseg::data::netpbm::{self, Pnm};
use acfseg::evaluation::{feature_similarity_map, ms_flip_infer};
use acfseg::training::checkpoint;
use acfseg::training::loss::{balanced_ce, bootstrap_select, prob_on_correct, BootstrapConfig};
use acfseg::training::optim::poly_lr;
use acfseg::training::OptimState;
use acfseg::{CoarseProbs, ConfusionMatrix, EvalConfig, Graph, Model, NetworkConfig, Tensor};
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// `(B, N, C, H, W)` for small ACF instances.
fn acf_dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=2, 2usize..=5, 1usize..=6, 1usize..=5, 1usize..=5)
}

fn softmax_probs(logits: &Tensor) -> Tensor {
    acfseg::tensor::softmax(logits, 1).unwrap()
}

proptest! {
    // Logit spreads beyond ~17 round the largest f32 probability to exactly 1.
    #[test]
    fn softmax_rows_are_distributions(t in (1usize..=4, 2usize..=6).prop_flat_map(|(r, c)| tensor(vec![r, c], -5.0, 5.0))) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = g.softmax(x, 1).unwrap();
        let (r, c) = (t.shape()[0], t.shape()[1]);
        for row in g.value(s).data().chunks(c).take(r) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn reshape_round_trip_is_identity(t in (1usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(a, b, c)| tensor(vec![a, b, c], -1.0, 1.0))) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let flat = g.reshape(x, &[t.numel()]).unwrap();
        let back = g.reshape(flat, t.shape()).unwrap();
        prop_assert_eq!(g.value(back), &t);
    }

    #[test]
    fn one_hot_centers_are_class_means(
        (dims, labels, feat) in acf_dims().prop_flat_map(|(b, n, c, h, w)| {
            (Just((b, n, c, h, w)), prop::collection::vec(0..n, b * h * w), tensor(vec![b, c, h, w], -1.0, 1.0))
        })
    ) {
        let (b, n, c, h, w) = dims;
        let hw = h * w;
        let mut onehot = vec![0.0f32; b * n * hw];
        for (px, &l) in labels.iter().enumerate() {
            onehot[((px / hw) * n + l) * hw + px % hw] = 1.0;
        }
        let mut g = Graph::new();
        let fv = g.constant(feat.clone());
        let pv = g.constant(Tensor::new(&[b, n, h, w], onehot).unwrap());
        let p = CoarseProbs::new(&g, pv).unwrap();
        let centers = class_center(&mut g, fv, p).unwrap();
        let got = g.value(centers.var()).data();
        for bi in 0..b {
            for i in 0..n {
                let members: Vec<usize> = (0..hw).filter(|&j| labels[bi * hw + j] == i).collect();
                if members.is_empty() {
                    continue;
                }
                for ch in 0..c {
                    let mean = members.iter().map(|&j| feat.data()[(bi * c + ch) * hw + j] as f64).sum::<f64>()
                        / members.len() as f64;
                    prop_assert!((got[(bi * n + i) * c + ch] as f64 - mean).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn centers_and_sum_feature_are_convex_combinations(
        (dims, logits, feat) in acf_dims().prop_flat_map(|(b, n, c, h, w)| {
            (Just((b, n, c, h, w)), tensor(vec![b, n, h, w], -3.0, 3.0), tensor(vec![b, c, h, w], -1.0, 1.0))
        })
    ) {
        let (b, n, c, h, w) = dims;
        let hw = h * w;
        let mut g = Graph::new();
        let fv = g.constant(feat.clone());
        let pv = g.constant(softmax_probs(&logits));
        let p = CoarseProbs::new(&g, pv).unwrap();
        let centers = class_center(&mut g, fv, p).unwrap();
        let sum = class_attention_sum(&mut g, centers, p).unwrap();
        let ct = g.value(centers.var()).data().to_vec();
        let fa = g.value(sum.var()).data();
        let probs = g.value(p.var()).data().to_vec();
        let tol = 1e-5;
        for bi in 0..b {
            for ch in 0..c {
                let plane = &feat.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                let (lo, hi) = plane.iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
                let col: Vec<f32> = (0..n).map(|i| ct[(bi * n + i) * c + ch]).collect();
                for (i, &v) in col.iter().enumerate() {
                    // The denominator's epsilon pulls a center towards zero by
                    // a factor mass / (mass + eps).
                    let mass: f32 = probs[(bi * n + i) * hw..(bi * n + i + 1) * hw].iter().sum();
                    let shrink = CENTER_EPS / mass * lo.abs().max(hi.abs());
                    prop_assert!(v >= lo - tol - shrink && v <= hi + tol + shrink);
                }
                let (clo, chi) = col.iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
                for j in 0..hw {
                    let v = fa[(bi * c + ch) * hw + j];
                    prop_assert!(v >= clo - tol && v <= chi + tol);
                }
            }
        }
    }

    #[test]
    fn class_permutation_is_equivariant(
        (dims, logits, feat, perm) in acf_dims().prop_flat_map(|(b, n, c, h, w)| {
            (
                Just((b, n, c, h, w)),
                tensor(vec![b, n, h, w], -3.0, 3.0),
                tensor(vec![b, c, h, w], -1.0, 1.0),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    ) {
        let (b, n, c, h, w) = dims;
        let hw = h * w;
        let probs = softmax_probs(&logits);
        let mut permuted = vec![0.0f32; probs.numel()];
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                permuted[(bi * n + i) * hw..(bi * n + i + 1) * hw]
                    .copy_from_slice(&probs.data()[(bi * n + src) * hw..(bi * n + src + 1) * hw]);
            }
        }
        let run = |p: Tensor| {
            let mut g = Graph::new();
            let fv = g.constant(feat.clone());
            let pv = g.constant(p);
            let p = CoarseProbs::new(&g, pv).unwrap();
            let centers = class_center(&mut g, fv, p).unwrap();
            let sum = class_attention_sum(&mut g, centers, p).unwrap();
            (g.value(centers.var()).clone(), g.value(sum.var()).clone())
        };
        let (c0, s0) = run(probs);
        let (c1, s1) = run(Tensor::new(&[b, n, h, w], permuted).unwrap());
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                for ch in 0..c {
                    let a = c1.data()[(bi * n + i) * c + ch];
                    let e = c0.data()[(bi * n + src) * c + ch];
                    prop_assert!((a - e).abs() < 1e-6);
                }
            }
        }
        prop_assert!(s0.max_abs_diff(&s1) < 1e-5);
    }

    #[test]
    fn similarity_stays_in_unit_interval(
        (f, r, q) in (1usize..=6, 1usize..=6, 1usize..=6)
            .prop_flat_map(|(c, h, w)| (tensor(vec![c, h, w], -5.0, 5.0), 0..h, 0..w))
    ) {
        let map = feature_similarity_map(&f, r, q).unwrap();
        prop_assert!(map.data().iter().all(|&v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn confusion_matrix_ignores_image_order(
        images in prop::collection::vec(prop::collection::vec((0u8..3, 0usize..3), 1..20), 1..6),
        seed in any::<u64>(),
    ) {
        let accumulate = |order: &[usize]| {
            let mut m = ConfusionMatrix::new(3);
            for &i in order {
                let (gt, pred): (Vec<u8>, Vec<usize>) = images[i].iter().cloned().unzip();
                m.add(&gt, &pred, 255).unwrap();
            }
            m
        };
        let mut order: Vec<usize> = (0..images.len()).collect();
        let a = accumulate(&order);
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, accumulate(&order));
    }

    #[test]
    fn relabelling_classes_keeps_miou(
        pixels in prop::collection::vec((0u8..4, 0usize..4), 1..60),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (gt, pred): (Vec<u8>, Vec<usize>) = pixels.iter().cloned().unzip();
        let mut a = ConfusionMatrix::new(4);
        a.add(&gt, &pred, 255).unwrap();
        let gt2: Vec<u8> = gt.iter().map(|&l| perm[l as usize] as u8).collect();
        let pred2: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let mut b = ConfusionMatrix::new(4);
        b.add(&gt2, &pred2, 255).unwrap();
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn poly_lr_never_increases(max_iter in 1usize..5000, power in 0.0f64..3.0, lr0 in 1e-4f64..1.0) {
        let s = OptimState::new(lr0, 0.9, 0.0, max_iter, power);
        let mut prev = f64::INFINITY;
        for i in 0..=max_iter.min(300) {
            let it = i * max_iter / max_iter.min(300);
            let lr = poly_lr(it, &s).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(max_iter, &s).unwrap(), if power == 0.0 { lr0 } else { 0.0 });
    }

    #[test]
    fn full_bootstrap_equals_plain_loss(
        (n, logits, labels) in (2usize..=4, 1usize..=4, 1usize..=4).prop_flat_map(|(n, h, w)| {
            (Just(n), tensor(vec![1, n, h, w], -4.0, 4.0), prop::collection::vec(0u8..n as u8, h * w))
        })
    ) {
        let weights = vec![1.0; n];
        let mut g = Graph::new();
        let lv = g.constant(logits);
        let plain = balanced_ce(&mut g, lv, &labels, 255, &weights, None).unwrap();
        let cfg = BootstrapConfig { enabled: true, theta: 1.0, min_k: labels.len() };
        let mask = bootstrap_select(&prob_on_correct(&g, lv, &labels, 255).unwrap(), &cfg);
        prop_assert!(mask.iter().all(|&m| m));
        let boot = balanced_ce(&mut g, lv, &labels, 255, &weights, Some(&mask)).unwrap();
        prop_assert!((g.value(plain).item() - g.value(boot).item()).abs() < 1e-6);
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for channels in [1usize, 3] {
            let data: Vec<u8> = (0..w * h * channels).map(|_| rng.random()).collect();
            let p = if channels == 1 { Pnm::gray(w, h, data).unwrap() } else { Pnm::rgb(w, h, data).unwrap() };
            prop_assert_eq!(netpbm::decode(&netpbm::encode(&p)).unwrap(), p);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::vec(
            (1usize..=3, 1usize..=3).prop_flat_map(|(a, b)| tensor(vec![a, b], -1e3, 1e3)),
            0..5,
        ),
        iter in any::<u64>(),
    ) {
        let named: IndexMap<String, Tensor> =
            tensors.into_iter().enumerate().map(|(i, t)| (format!("layer{i}.weight"), t)).collect();
        let (it, back) = checkpoint::decode(&checkpoint::encode(iter, &named).unwrap()).unwrap();
        prop_assert_eq!(it, iter);
        prop_assert_eq!(back, named);
    }
}

fn tiny_model() -> Model {
    let cfg = NetworkConfig { base_channels: 4, reduced_channels: 4, head_channels: 4, ..Default::default() };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fused_probabilities_are_distributions(
        img in tensor(vec![1, 3, 24, 16], 0.0, 1.0),
        flip in any::<bool>(),
        scales in prop::collection::vec(0.5f32..1.5, 1..3),
    ) {
        let model = tiny_model();
        let p = ms_flip_infer(&model, &img, &EvalConfig { scales, flip }).unwrap();
        for t in [&p.coarse, p.fine.as_ref().unwrap()] {
            let (_, n, h, w) = t.dims4().unwrap();
            prop_assert_eq!((h, w), (24, 16));
            for j in 0..h * w {
                let s: f64 = (0..n).map(|i| t.data()[i * h * w + j] as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
