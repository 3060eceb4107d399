//! Central finite-difference checks of every differentiable op and of the
//! composed ACF and ASPP modules.
//!
//! Each check projects the op output onto a fixed random tensor `r`, so the
//! scalar `L = Σ y·r` exercises every output element. Analytic gradients of
//! `L` come from the tape; numeric ones from `(L(x+h) − L(x−h)) / 2h`, with
//! `L` accumulated in f64. The reported error for one element is
//! `|a − n| / max(|a|, |n|, 1)`.
//!
//! Composed modules contain ReLUs, and a difference quotient that straddles
//! a kink says nothing about the derivative. Inputs are therefore redrawn
//! until every ReLU input is at least [`KINK_MARGIN`] from zero, and any
//! element whose perturbation still flips a ReLU is skipped and counted.

use crate::acf::{self, AcfModule, AcfVariant, CoarseProbs};
use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::network::Aspp;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;
/// Elements perturbed per input tensor; larger inputs are subsampled.
pub const MAX_ELEMENTS: usize = 48;
pub const KINK_MARGIN: f32 = 5e-3;
const MAX_REDRAWS: u64 = 256;

/// A graph, the handles of its inputs (in input order), and its output.
pub type Built = (Graph, Vec<Var>, Var);
type BuildFn = Box<dyn Fn(&[Tensor]) -> Result<Built>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: BuildFn,
}

pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "add_scalar",
    "recip",
    "relu",
    "sum",
    "mean",
    "sum_axis",
    "softmax",
    "matmul",
    "bmm",
    "transpose",
    "reshape",
    "concat",
    "upsample_bilinear",
    "upsample_bilinear_half_pixel",
    "pad_edge",
    "avg_pool2d",
    "global_avg_pool",
    "scale_rows",
    "softmax_cross_entropy",
    "conv2d",
    "conv2d_strided",
    "conv2d_dilated",
    "batch_norm2d",
    "class_center",
    "class_attention_sum",
    "class_attention_concat",
    "broadcast_centers",
    "acf_sum",
    "acf_concat",
    "acf_center_only",
    "aspp",
];

fn params(g: &mut Graph, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| g.param(t.clone())).collect()
}

/// Build a case from a function of graph inputs.
fn simple(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(move |xs| {
            let mut g = Graph::new();
            let v = params(&mut g, xs);
            let y = f(&mut g, &v)?;
            Ok((g, v, y))
        }),
    }
}

/// Build a case around layers whose parameters live in `store`. The inputs
/// are `data` followed by every parameter in store order.
fn module(
    name: &'static str,
    data: Vec<Tensor>,
    store: ParamStore,
    f: impl Fn(&mut Session, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let n_data = data.len();
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = data;
    inputs.extend(store.params().map(|(_, p)| p.value.clone()));
    Case {
        name,
        inputs,
        build: Box::new(move |xs| {
            let mut st = store.clone();
            for (n, t) in names.iter().zip(&xs[n_data..]) {
                st.get_mut(n).expect("registered").value = t.clone();
            }
            let mut s = Session::train(&mut st);
            let mut vars: Vec<Var> = xs[..n_data].iter().map(|t| s.g.param(t.clone())).collect();
            for n in &names {
                vars.push(s.param(n)?);
            }
            let y = f(&mut s, &vars[..n_data])?;
            let g = std::mem::take(&mut s.g);
            Ok((g, vars, y))
        }),
    }
}

/// Uniform values bounded away from zero, so ReLU kinks and reciprocal
/// poles stay out of reach of the perturbation.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn u(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Smallest `|x|` over all ReLU inputs of the case at its own inputs.
fn kink_distance(c: &Case) -> Result<f32> {
    let (g, _, _) = (c.build)(&c.inputs)?;
    Ok(g.vars()
        .filter(|&v| g.op_name(v) == "relu")
        .flat_map(|v| g.parents(v).collect::<Vec<_>>())
        .flat_map(|p| g.value(p).data().iter().map(|x| x.abs()))
        .fold(f32::INFINITY, f32::min))
}

/// The case for `name` drawn from `seed`, redrawn on fresh RNG streams
/// while any ReLU input lies within [`KINK_MARGIN`] of zero.
pub fn case(name: &str, seed: u64) -> Result<Case> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let c = draw_case(name, &mut rng)?;
        if kink_distance(&c)? >= KINK_MARGIN {
            return Ok(c);
        }
    }
    Err(Error::invalid(format!("no kink-free draw for `{name}` with seed {seed}")))
}

fn draw_case(name: &str, r: &mut ChaCha8Rng) -> Result<Case> {
    let c = match name {
        "add" => simple("add", vec![u(&[2, 3], r), u(&[2, 3], r)], |g, v| g.add(v[0], v[1])),
        "mul" => simple("mul", vec![u(&[2, 3], r), u(&[2, 3], r)], |g, v| g.mul(v[0], v[1])),
        "scale" => simple("scale", vec![u(&[4], r)], |g, v| g.scale(v[0], -1.7)),
        "add_scalar" => simple("add_scalar", vec![u(&[4], r)], |g, v| g.add_scalar(v[0], 0.3)),
        "recip" => simple("recip", vec![Tensor::rand_uniform(&[5], 0.5, 2.0, r)], |g, v| g.recip(v[0])),
        "relu" => simple("relu", vec![away_from_zero(&[6], r)], |g, v| g.relu(v[0])),
        "sum" => simple("sum", vec![u(&[2, 3], r)], |g, v| g.sum(v[0])),
        "mean" => simple("mean", vec![u(&[2, 3], r)], |g, v| g.mean(v[0])),
        "sum_axis" => simple("sum_axis", vec![u(&[2, 3, 4], r)], |g, v| g.sum_axis(v[0], 1)),
        "softmax" => simple("softmax", vec![u(&[2, 3, 4], r)], |g, v| g.softmax(v[0], 1)),
        "matmul" => simple("matmul", vec![u(&[3, 4], r), u(&[4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        "bmm" => simple("bmm", vec![u(&[2, 3, 4], r), u(&[2, 4, 2], r)], |g, v| g.bmm(v[0], v[1])),
        "transpose" => simple("transpose", vec![u(&[2, 3, 4], r)], |g, v| g.transpose(v[0], &[2, 0, 1])),
        "reshape" => simple("reshape", vec![u(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4])),
        "concat" => simple("concat", vec![u(&[2, 1, 3], r), u(&[2, 2, 3], r)], |g, v| g.concat(v, 1)),
        "upsample_bilinear" => simple("upsample_bilinear", vec![u(&[1, 2, 3, 3], r)], |g, v| {
            g.upsample_bilinear(v[0], 7, 5, true)
        }),
        "upsample_bilinear_half_pixel" => simple("upsample_bilinear_half_pixel", vec![u(&[1, 2, 3, 3], r)], |g, v| {
            g.upsample_bilinear(v[0], 7, 5, false)
        }),
        "pad_edge" => simple("pad_edge", vec![u(&[1, 2, 3, 2], r)], |g, v| g.pad_edge(v[0], 2, 3)),
        "avg_pool2d" => simple("avg_pool2d", vec![u(&[1, 2, 5, 5], r)], |g, v| g.avg_pool2d(v[0], 3, 2)),
        "global_avg_pool" => simple("global_avg_pool", vec![u(&[2, 3, 3, 2], r)], |g, v| g.global_avg_pool(v[0])),
        "scale_rows" => simple("scale_rows", vec![u(&[2, 3, 4], r), u(&[2, 3], r)], |g, v| g.scale_rows(v[0], v[1])),
        "softmax_cross_entropy" => {
            let targets: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
            let weights: Vec<f32> = (0..8).map(|i| if i == 5 { 0.0 } else { r.random_range(0.5..2.0) }).collect();
            simple("softmax_cross_entropy", vec![u(&[2, 3, 2, 2], r)], move |g, v| {
                g.softmax_cross_entropy(v[0], &targets, &weights, 7.0)
            })
        }
        "conv2d" => simple("conv2d", vec![u(&[2, 2, 5, 5], r), u(&[3, 2, 3, 3], r), u(&[3], r)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)
        }),
        "conv2d_strided" => simple("conv2d_strided", vec![u(&[1, 2, 6, 6], r), u(&[2, 2, 3, 3], r)], |g, v| {
            g.conv2d(v[0], v[1], None, 2, 1, 1)
        }),
        "conv2d_dilated" => simple("conv2d_dilated", vec![u(&[1, 2, 6, 6], r), u(&[2, 2, 3, 3], r)], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 2, 2)
        }),
        "batch_norm2d" => simple(
            "batch_norm2d",
            vec![u(&[2, 3, 2, 2], r), Tensor::rand_uniform(&[3], 0.5, 1.5, r), u(&[3], r)],
            |g, v| {
                let mut stats = RunningStats::new(3);
                g.batch_norm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, 0.9, 1e-5)
            },
        ),
        "class_center" => simple("class_center", vec![u(&[2, 3, 2, 3], r), u(&[2, 2, 2, 3], r)], |g, v| {
            let p = CoarseProbs::from_logits(g, v[1])?;
            Ok(acf::class_center(g, v[0], p)?.var())
        }),
        "class_attention_sum" => simple("class_attention_sum", vec![u(&[2, 3, 4], r), u(&[2, 3, 2, 2], r)], |g, v| {
            let p = CoarseProbs::from_logits(g, v[1])?;
            Ok(acf::class_attention_sum(g, acf::ClassCenters::new(g, v[0])?, p)?.var())
        }),
        "class_attention_concat" => {
            simple("class_attention_concat", vec![u(&[2, 3, 4], r), u(&[2, 3, 2, 2], r)], |g, v| {
                let p = CoarseProbs::from_logits(g, v[1])?;
                Ok(acf::class_attention_concat(g, acf::ClassCenters::new(g, v[0])?, p)?.var())
            })
        }
        "broadcast_centers" => simple("broadcast_centers", vec![u(&[2, 3, 4], r)], |g, v| {
            acf::broadcast_centers(g, acf::ClassCenters::new(g, v[0])?, 2, 3)
        }),
        "acf_sum" | "acf_concat" | "acf_center_only" => {
            let (name, variant) = match name {
                "acf_sum" => ("acf_sum", AcfVariant::Sum),
                "acf_concat" => ("acf_concat", AcfVariant::Concat),
                _ => ("acf_center_only", AcfVariant::CenterOnly),
            };
            let mut store = ParamStore::new();
            let m = AcfModule::new(&mut store, "acf", variant, 4, 3, 3, 3, r)?;
            module(name, vec![u(&[2, 4, 3, 3], r), u(&[2, 3, 3, 3], r)], store, move |s, v| {
                let p = CoarseProbs::from_logits(&mut s.g, v[1])?;
                Ok(m.forward(s, v[0], p)?.fused)
            })
        }
        "aspp" => {
            let mut store = ParamStore::new();
            let a = Aspp::new(&mut store, 3, 2, &[1, 2, 3], r)?;
            module("aspp", vec![u(&[2, 3, 4, 4], r)], store, move |s, v| a.forward(s, v[0]))
        }
        other => return Err(Error::invalid(format!("unknown gradcheck op `{other}`; known: {}", OPS.join(", ")))),
    };
    Ok(c)
}

/// Sign pattern of every ReLU output in the graph.
fn relu_pattern(g: &Graph) -> Vec<bool> {
    g.vars()
        .filter(|&v| g.op_name(v) == "relu")
        .flat_map(|v| g.value(v).data().iter().map(|&x| x > 0.0))
        .collect()
}

fn projected(g: &Graph, y: Var, r: &Tensor) -> f64 {
    g.value(y).data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckStats {
    /// Largest relative error over the compared elements.
    pub max_rel_error: f64,
    pub compared: usize,
    /// Elements whose perturbation crossed a ReLU kink.
    pub skipped: usize,
}

pub fn check(case: &Case, seed: u64) -> Result<CheckStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut g, vars, y) = (case.build)(&case.inputs)?;
    let r = Tensor::rand_uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;
    let base_pattern = relu_pattern(&g);
    let mut stats = CheckStats { max_rel_error: 0.0, compared: 0, skipped: 0 };
    for (k, (&v, x)) in vars.iter().zip(&case.inputs).enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = g.grad(v).unwrap_or(&zero).clone();
        let idx: Vec<usize> = if x.numel() <= MAX_ELEMENTS {
            (0..x.numel()).collect()
        } else {
            sample(&mut rng, x.numel(), MAX_ELEMENTS).into_vec()
        };
        for i in idx {
            let eval = |delta: f32| -> Result<(f64, bool)> {
                let mut xs = case.inputs.clone();
                xs[k].data_mut()[i] += delta;
                let (g2, _, y2) = (case.build)(&xs)?;
                Ok((projected(&g2, y2, &r), relu_pattern(&g2) == base_pattern))
            };
            let ((plus, same_p), (minus, same_m)) = (eval(STEP)?, eval(-STEP)?);
            if !(same_p && same_m) {
                stats.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP as f64);
            let a = analytic.data()[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            stats.max_rel_error = stats.max_rel_error.max(err);
            stats.compared += 1;
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub seed: u64,
    pub stats: CheckStats,
}

/// Largest tolerated share of kink-skipped elements; more would leave too
/// little of the gradient verified.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

impl CheckResult {
    pub fn passed(&self) -> bool {
        let total = self.stats.compared + self.stats.skipped;
        self.stats.max_rel_error < TOLERANCE
            && self.stats.compared > 0
            && (self.stats.skipped as f64) <= MAX_SKIPPED_FRACTION * total as f64
    }
}

/// Run `ops` (all when empty) for every seed in `seeds`.
pub fn run(ops: &[&str], seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let names: Vec<&str> = if ops.is_empty() { OPS.to_vec() } else { ops.to_vec() };
    let mut out = Vec::new();
    for name in names {
        for &seed in seeds {
            let c = case(name, seed)?;
            out.push(CheckResult {
                op: c.name,
                seed,
                stats: check(&c, seed)?,
            });
        }
    }
    Ok(out)
}
