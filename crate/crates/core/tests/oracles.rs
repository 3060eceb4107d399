//! Graph ops against straightforward loop implementations.

use acfseg::acf::{class_attention_concat, class_attention_sum, class_center, CENTER_EPS};
use acfseg::evaluation::feature_similarity_map;
use acfseg::training::loss::balanced_ce;
use acfseg::{ClassCenters, CoarseProbs, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn assert_close(got: &[f32], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((*g as f64 - w).abs() <= tol, "{what}[{i}]: {g} vs {w}");
    }
}

/// Random per-pixel distributions over `n` classes, `B×N×H×W`.
fn random_probs(b: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let hw = h * w;
    let mut d = vec![0.0f32; b * n * hw];
    for bi in 0..b {
        for j in 0..hw {
            let e: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..n {
                d[(bi * n + i) * hw + j] = (e[i] / z) as f32;
            }
        }
    }
    Tensor::new(&[b, n, h, w], d).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 60 {
        let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let k = [1, 3][rng.random_range(0..2)];
        let (s, p, d) = (rng.random_range(1..=2), rng.random_range(0..=2), rng.random_range(1..=2));
        let span = d * (k - 1) + 1;
        if h + 2 * p < span || w + 2 * p < span {
            continue;
        }
        let (oh, ow) = ((h + 2 * p - span) / s + 1, (w + 2 * p - span) / s + 1);
        let x = uniform(&[b, cin, h, w], &mut rng);
        let wt = uniform(&[cout, cin, k, k], &mut rng);
        let bias = uniform(&[cout], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), s, p, d).unwrap();
        assert_eq!(g.shape(y), &[b, cout, oh, ow]);

        let (xd, wd) = (x.data(), wt.data());
        let mut want = Vec::with_capacity(b * cout * oh * ow);
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co] as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky * d) as isize - p as isize;
                                    let ix = (ox * s + kx * d) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * cin + ci) * h + iy as usize) * w + ix as usize;
                                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                                    acc += xd[xi] as f64 * wd[wi] as f64;
                                }
                            }
                        }
                        want.push(acc);
                    }
                }
            }
        }
        assert_close(g.value(y).data(), &want, 1e-4, "conv2d");
        checked += 1;
    }
}

#[test]
fn matmul_and_bmm_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let (bt, m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9));
        let a = uniform(&[bt, m, k], &mut rng);
        let b = uniform(&[bt, k, n], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.bmm(av, bv).unwrap();
        let mut want = vec![0.0f64; bt * m * n];
        for t in 0..bt {
            for i in 0..m {
                for j in 0..n {
                    want[(t * m + i) * n + j] = (0..k)
                        .map(|q| a.data()[(t * m + i) * k + q] as f64 * b.data()[(t * k + q) * n + j] as f64)
                        .sum();
                }
            }
        }
        assert_close(g.value(c).data(), &want, 1e-4, "bmm");

        let a2 = Tensor::new(&[m, k], a.data()[..m * k].to_vec()).unwrap();
        let b2 = Tensor::new(&[k, n], b.data()[..k * n].to_vec()).unwrap();
        let (av, bv) = (g.constant(a2), g.constant(b2));
        let c2 = g.matmul(av, bv).unwrap();
        assert_close(g.value(c2).data(), &want[..m * n], 1e-4, "matmul");
    }
}

#[test]
fn acf_ops_match_per_pixel_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (b, n, c) = (rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(1..=8));
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let hw = h * w;
        let feat = uniform(&[b, c, h, w], &mut rng);
        let probs = random_probs(b, n, h, w, &mut rng);
        let centers_in = uniform(&[b, n, c], &mut rng);

        let mut g = Graph::new();
        let fv = g.constant(feat.clone());
        let pv = g.constant(probs.clone());
        let p = CoarseProbs::new(&g, pv).unwrap();
        let centers = class_center(&mut g, fv, p).unwrap();
        let cv = g.constant(centers_in.clone());
        let given = ClassCenters::new(&g, cv).unwrap();
        let sum = class_attention_sum(&mut g, given, p).unwrap();
        let cat = class_attention_concat(&mut g, given, p).unwrap();

        let (f, pr, ct) = (feat.data(), probs.data(), centers_in.data());
        let mut want_centers = vec![0.0f64; b * n * c];
        let mut want_sum = vec![0.0f64; b * c * hw];
        let mut want_cat = vec![0.0f64; b * n * c * hw];
        for bi in 0..b {
            for i in 0..n {
                let prob = |j: usize| pr[(bi * n + i) * hw + j] as f64;
                let mass: f64 = (0..hw).map(prob).sum();
                for ch in 0..c {
                    let acc: f64 = (0..hw).map(|j| prob(j) * f[(bi * c + ch) * hw + j] as f64).sum();
                    want_centers[(bi * n + i) * c + ch] = acc / (mass + CENTER_EPS as f64);
                }
            }
            for j in 0..hw {
                for i in 0..n {
                    let pij = pr[(bi * n + i) * hw + j] as f64;
                    for ch in 0..c {
                        let v = pij * ct[(bi * n + i) * c + ch] as f64;
                        want_sum[(bi * c + ch) * hw + j] += v;
                        want_cat[(bi * n * c + i * c + ch) * hw + j] = v;
                    }
                }
            }
        }
        assert_close(g.value(centers.var()).data(), &want_centers, 1e-5, "class_center");
        assert_close(g.value(sum.var()).data(), &want_sum, 1e-5, "class_attention_sum");
        assert_close(g.value(cat.var()).data(), &want_cat, 1e-5, "class_attention_concat");
    }
}

#[test]
fn balanced_ce_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let (b, n, h, w) = (rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(1..=5), rng.random_range(1..=5));
        let logits = Tensor::rand_uniform(&[b, n, h, w], -4.0, 4.0, &mut rng);
        let labels: Vec<u8> = (0..b * h * w)
            .map(|_| if rng.random_bool(0.2) { 255 } else { rng.random_range(0..n) as u8 })
            .collect();
        let weights: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut g = Graph::new();
        let lv = g.constant(logits.clone());
        let loss = balanced_ce(&mut g, lv, &labels, 255, &weights, None).unwrap();

        let hw = h * w;
        let (mut total, mut count) = (0.0f64, 0usize);
        for (px, &l) in labels.iter().enumerate() {
            if l == 255 {
                continue;
            }
            let (bi, j) = (px / hw, px % hw);
            let z: Vec<f64> = (0..n).map(|i| logits.data()[(bi * n + i) * hw + j] as f64).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += weights[l as usize] as f64 * (lse - z[l as usize]);
            count += 1;
        }
        let want = if count == 0 { 0.0 } else { total / count as f64 };
        assert_close(&[g.value(loss).item()], &[want], 1e-5, "balanced_ce");
    }
}

#[test]
fn similarity_map_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let (c, h, w) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let f = uniform(&[c, h, w], &mut rng);
        let (r, q) = (rng.random_range(0..h), rng.random_range(0..w));
        let map = feature_similarity_map(&f, r, q).unwrap();
        let at = |ch: usize, j: usize| f.data()[ch * h * w + j] as f64;
        let anchor = r * w + q;
        let want: Vec<f64> = (0..h * w)
            .map(|j| {
                let dot: f64 = (0..c).map(|ch| at(ch, anchor) * at(ch, j)).sum();
                let na: f64 = (0..c).map(|ch| at(ch, anchor).powi(2)).sum::<f64>().sqrt();
                let nj: f64 = (0..c).map(|ch| at(ch, j).powi(2)).sum::<f64>().sqrt();
                if na * nj == 0.0 { 0.0 } else { dot / (na * nj) }
            })
            .collect();
        assert_close(map.data(), &want, 1e-5, "similarity");
        assert!((map.data()[anchor] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn node_used_twice_sums_path_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = uniform(&[2, 3], &mut rng);
    let w = uniform(&[2, 3], &mut rng);

    // Each path on its own.
    let path_grad = |use_mul: bool| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let wv = g.constant(w.clone());
        let y = if use_mul { g.mul(x, wv).unwrap() } else { g.relu(x).unwrap() };
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.grad(x).unwrap().clone()
    };
    let (a, b) = (path_grad(true), path_grad(false));

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let wv = g.constant(w.clone());
    let m = g.mul(x, wv).unwrap();
    let r = g.relu(x).unwrap();
    let y = g.add(m, r).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let both = g.grad(x).unwrap();
    let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| (p + q) as f64).collect();
    assert_close(both.data(), &want, 1e-7, "shared node gradient");
}
