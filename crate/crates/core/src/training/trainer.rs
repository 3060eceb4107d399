use super::augment::augment;
use super::checkpoint;
use super::config::TrainConfig;
use super::loss::{balanced_ce, bootstrap_select, class_weights, prob_on_correct, total_loss_var, BootstrapConfig};
use super::optim::{poly_lr, sgd_step, OptimState};
use crate::autodiff::{Graph, Var};
use crate::data::{collate, Sample, IGNORE_ID};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::network::Model;
use crate::nn::Session;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "iter,lr,loss_total,loss_aux,loss_coarse,loss_fine,val_miou";

/// Named RNG streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Init = 0,
    Augment = 1,
    Sampling = 2,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the completed iteration.
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub aux: f64,
    pub coarse: f64,
    pub fine: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    samples: Vec<Sample>,
    iter: usize,
    aug_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let model = Model::new(config.network.clone(), &mut stream_rng(config.seed, RngStream::Init))?;
        let optim = OptimState::new(config.lr, config.momentum, config.weight_decay, config.max_iter, config.poly_power);
        Ok(Trainer {
            aug_rng: stream_rng(config.seed, RngStream::Augment),
            sample_rng: stream_rng(config.seed, RngStream::Sampling),
            order: Vec::new(),
            cursor: 0,
            iter: 0,
            config,
            model,
            optim,
            samples,
        })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn done(&self) -> bool {
        self.iter >= self.config.max_iter
    }

    /// Next index of a reshuffled-every-epoch permutation.
    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.sample_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<u8>)> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = self.next_index();
            batch.push(augment(&self.samples[i], &self.config.augment, &mut self.aug_rng)?);
        }
        collate(&batch)
    }

    /// One forward/backward pass and SGD update.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.done() {
            return Err(Error::invalid("training already finished"));
        }
        let (images, labels) = self.next_batch()?;
        let stats = self.step_on(&images, &labels)?;
        Ok(stats)
    }

    /// Like [`Trainer::step`] but on a caller-supplied batch.
    pub fn step_on(&mut self, images: &Tensor, labels: &[u8]) -> Result<StepStats> {
        let lr = poly_lr(self.iter, &self.optim)?;
        self.model.params.zero_grad();
        let cfg = &self.config;
        let n = cfg.network.num_classes;
        let weights = class_weights(labels, n, IGNORE_ID);
        let mut s = Session::train(&mut self.model.params);
        let x = s.g.constant(images.clone());
        let out = self.model.network.forward(&mut s, x)?;
        let g = &mut s.g;
        let aux = balanced_ce(g, out.aux, labels, IGNORE_ID, &weights, None)?;
        let coarse = bootstrapped_ce(g, out.coarse, labels, &weights, &cfg.bootstrap)?;
        let fine = out
            .fine
            .map(|f| bootstrapped_ce(g, f, labels, &weights, &cfg.bootstrap))
            .transpose()?;
        let total = total_loss_var(g, aux, coarse, fine, &cfg.loss)?;
        let stats = StepStats {
            iter: self.iter + 1,
            lr,
            total: g.value(total).item() as f64,
            aux: g.value(aux).item() as f64,
            coarse: g.value(coarse).item() as f64,
            fine: fine.map(|f| g.value(f).item() as f64),
        };
        if !stats.total.is_finite() {
            return Err(non_finite(g, total));
        }
        g.backward(total)?;
        s.accumulate_grads()?;
        sgd_step(&mut self.model.params, &mut self.optim, lr);
        self.iter += 1;
        Ok(stats)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.iter as u64, &self.model, Some(&self.optim))
    }
}

/// Error naming the first graph node with a non-finite value.
fn non_finite(g: &Graph, fallback: Var) -> Error {
    let (v, op) = g.first_non_finite().unwrap_or((fallback, g.op_name(fallback)));
    Error::NonFinite { op, node: v.index() }
}

fn bootstrapped_ce(g: &mut Graph, logits: Var, labels: &[u8], weights: &[f32], cfg: &BootstrapConfig) -> Result<Var> {
    if !cfg.enabled {
        return balanced_ce(g, logits, labels, IGNORE_ID, weights, None);
    }
    let mask = bootstrap_select(&prob_on_correct(g, logits, labels, IGNORE_ID)?, cfg);
    balanced_ce(g, logits, labels, IGNORE_ID, weights, Some(&mask))
}

/// Files and numbers produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepStats>,
    /// `(iteration, val mIoU)` at every evaluation point.
    pub evals: Vec<(usize, f64)>,
    pub final_report: Option<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub model: Model,
}

pub fn metrics_row(s: &StepStats, val_miou: Option<f64>) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    format!(
        "{},{},{},{},{},{},{}",
        s.iter,
        s.lr,
        s.total,
        s.aux,
        s.coarse,
        opt(s.fine),
        opt(val_miou)
    )
}

/// Full run: writes `metrics.csv`, `ckpt_<iter>.ckpt` every
/// `checkpoint_every` iterations, and `final.ckpt` into `run_dir`.
/// Validation mIoU (final prediction, single scale) is logged every
/// `eval_every` iterations and after the last one when `val` is non-empty.
pub fn train(
    config: TrainConfig,
    train_set: Vec<Sample>,
    val: &[Sample],
    class_names: &[String],
    run_dir: &Path,
    mut progress: impl FnMut(&StepStats, Option<f64>),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::file(run_dir, e))?;
    let mut t = Trainer::new(config, train_set)?;
    let (max_iter, eval_every, ckpt_every) = (t.config.max_iter, t.config.eval_every, t.config.checkpoint_every);
    let eval_cfg = EvalConfig::default();
    let mut csv = format!("{METRICS_HEADER}\n");
    let metrics_path = run_dir.join("metrics.csv");
    let mut out = TrainOutcome {
        steps: Vec::with_capacity(max_iter),
        evals: Vec::new(),
        final_report: None,
        checkpoints: Vec::new(),
        final_checkpoint: run_dir.join("final.ckpt"),
        model: t.model.clone(),
    };
    while !t.done() {
        let s = t.step()?;
        let last = s.iter == max_iter;
        let due = last || (eval_every > 0 && s.iter % eval_every == 0);
        let mut miou = None;
        if due && !val.is_empty() {
            let report = evaluate(&t.model, val, class_names, &eval_cfg)?;
            let m = report.miou()?;
            out.evals.push((s.iter, m));
            miou = Some(m);
            if last {
                out.final_report = Some(report);
            }
        }
        if ckpt_every > 0 && s.iter % ckpt_every == 0 && !last {
            let p = run_dir.join(format!("ckpt_{:06}.ckpt", s.iter));
            t.save_checkpoint(&p)?;
            out.checkpoints.push(p);
        }
        let _ = writeln!(csv, "{}", metrics_row(&s, miou));
        progress(&s, miou);
        out.steps.push(s);
    }
    t.save_checkpoint(&out.final_checkpoint)?;
    std::fs::write(&metrics_path, csv).map_err(|e| Error::file(metrics_path, e))?;
    out.model = t.model;
    Ok(out)
}
