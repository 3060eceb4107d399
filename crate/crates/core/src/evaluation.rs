//! Confusion matrices and mIoU, multi-scale and flipped inference, and
//! cosine feature-similarity maps.

use crate::data::netpbm::Pnm;
use crate::data::{Sample, IGNORE_ID};
use crate::error::{Error, Result};
use crate::network::{Model, OUTPUT_STRIDE};
use crate::tensor::{argmax_channels, flip_horizontal, resize_bilinear, softmax, Tensor};
use std::fmt::Write as _;

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count one labelled prediction; `ignore` pixels are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[usize], ignore: u8) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape("ConfusionMatrix::add", format!("{} labels, {} predictions", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == ignore {
                continue;
            }
            if g as usize >= self.n || p >= self.n {
                return Err(Error::invalid(format!("class pair ({g}, {p}) outside [0, {})", self.n)));
            }
            self.counts[g as usize * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::invalid("merging confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(tp, tp + fp + fn)` for class `i`.
    pub fn iou_parts(&self, i: usize) -> (u64, u64) {
        let row: u64 = (0..self.n).map(|p| self.get(i, p)).sum();
        let col: u64 = (0..self.n).map(|g| self.get(g, i)).sum();
        let tp = self.get(i, i);
        (tp, row + col - tp)
    }

    /// Per-class IoU; `None` where the class never occurs in either the
    /// ground truth or the prediction.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|i| match self.iou_parts(i) {
                (_, 0) => None,
                (tp, d) => Some(tp as f64 / d as f64),
            })
            .collect()
    }

    /// Mean IoU over classes with a non-zero denominator.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.ious().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::NoEvaluatedPixels);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::NoEvaluatedPixels);
        }
        Ok((0..self.n).map(|i| self.get(i, i)).sum::<u64>() as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f32>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scales: vec![1.0],
            flip: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("scales must be non-empty and all > 0"));
        }
        Ok(())
    }
}

/// `round(len·scale)` to the nearest positive multiple of the output stride.
pub fn scaled_len(len: usize, scale: f32) -> usize {
    let s = OUTPUT_STRIDE as f32;
    ((len as f32 * scale / s).round() as usize).max(1) * OUTPUT_STRIDE
}

/// Class probabilities at the input size from the coarse and (when present)
/// fine outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedProbs {
    pub coarse: Tensor,
    pub fine: Option<Tensor>,
}

impl FusedProbs {
    pub fn final_probs(&self) -> &Tensor {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Average softmax probabilities over every scale and, with `flip`, over
/// the mirrored copy of each scale. `image` is `B×3×H×W`.
pub fn ms_flip_infer(model: &Model, image: &Tensor, cfg: &EvalConfig) -> Result<FusedProbs> {
    cfg.validate()?;
    let (_, _, h, w) = image.dims4()?;
    let mut acc: Option<(Tensor, Option<Tensor>)> = None;
    let mut runs = 0usize;
    for &scale in &cfg.scales {
        let scaled = resize_bilinear(image, scaled_len(h, scale), scaled_len(w, scale))?;
        for mirrored in [false, true] {
            if mirrored && !cfg.flip {
                continue;
            }
            let input = if mirrored { flip_horizontal(&scaled) } else { scaled.clone() };
            let out = model.infer(&input)?;
            let back = |logits: &Tensor| -> Result<Tensor> {
                let p = softmax(logits, 1)?;
                let p = if mirrored { flip_horizontal(&p) } else { p };
                resize_bilinear(&p, h, w)
            };
            let coarse = back(&out.coarse_logits)?;
            let fine = out.fine_logits.as_ref().map(back).transpose()?;
            runs += 1;
            match &mut acc {
                None => acc = Some((coarse, fine)),
                Some((c, f)) => {
                    c.add_assign(&coarse);
                    if let (Some(f), Some(new)) = (f.as_mut(), fine.as_ref()) {
                        f.add_assign(new);
                    }
                }
            }
        }
    }
    let (mut coarse, mut fine) = acc.expect("at least one scale");
    if runs > 1 {
        let inv = 1.0 / runs as f32;
        coarse.scale_in_place(inv);
        if let Some(f) = fine.as_mut() {
            f.scale_in_place(inv);
        }
    }
    Ok(FusedProbs { coarse, fine })
}

/// Cosine similarity between the feature at `(row, col)` and every pixel of
/// a `C×H×W` feature map. Zero-norm vectors give 0.
pub fn feature_similarity_map(feature: &Tensor, row: usize, col: usize) -> Result<Tensor> {
    let &[c, h, w] = feature.shape() else {
        return Err(Error::shape("feature_similarity_map", format!("expected C×H×W, got {:?}", feature.shape())));
    };
    if row >= h || col >= w {
        return Err(Error::invalid(format!("anchor ({row}, {col}) outside {h}x{w}")));
    }
    let plane = h * w;
    let d = feature.data();
    let anchor: Vec<f64> = (0..c).map(|k| d[k * plane + row * w + col] as f64).collect();
    let anorm = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
    let out = (0..plane)
        .map(|j| {
            let (mut dot, mut nn) = (0.0f64, 0.0f64);
            for (k, a) in anchor.iter().enumerate() {
                let v = d[k * plane + j] as f64;
                dot += a * v;
                nn += v * v;
            }
            let denom = anorm * nn.sqrt();
            if denom == 0.0 { 0.0 } else { (dot / denom).clamp(-1.0, 1.0) as f32 }
        })
        .collect();
    Tensor::new(&[h, w], out)
}

/// Grey levels `round((v + 1)/2·255)` for values in `[-1, 1]`.
pub fn similarity_to_pgm(map: &Tensor) -> Result<Pnm> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("similarity_to_pgm", format!("expected H×W, got {:?}", map.shape())));
    };
    let data = map
        .data()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8)
        .collect();
    Pnm::gray(w, h, data)
}

/// Grey levels `round(p·255)` for one class plane of `1×N×H×W` probabilities.
pub fn probability_to_pgm(probs: &Tensor, class: usize) -> Result<Pnm> {
    let (b, n, h, w) = probs.dims4()?;
    if b != 1 || class >= n {
        return Err(Error::invalid(format!("class {class} of a {b}×{n} probability tensor")));
    }
    let plane = h * w;
    let data = probs.data()[class * plane..(class + 1) * plane]
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Pnm::gray(w, h, data)
}

/// Coarse and fine confusion matrices over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub coarse: ConfusionMatrix,
    pub fine: Option<ConfusionMatrix>,
}

impl EvalReport {
    /// Matrix of the network's final prediction.
    pub fn final_matrix(&self) -> &ConfusionMatrix {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }

    pub fn miou(&self) -> Result<f64> {
        self.final_matrix().miou()
    }

    pub fn coarse_miou(&self) -> Result<f64> {
        self.coarse.miou()
    }

    pub fn fine_miou(&self) -> Option<Result<f64>> {
        self.fine.as_ref().map(ConfusionMatrix::miou)
    }

    /// `class_id,class_name,iou_coarse,iou_fine`, then `miou` and
    /// `pixel_accuracy` summary rows. Missing values are left empty.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let coarse = self.coarse.ious();
        let fine = self.fine.as_ref().map(ConfusionMatrix::ious);
        let mut s = String::from("class_id,class_name,iou_coarse,iou_fine\n");
        for (i, name) in self.class_names.iter().enumerate() {
            let f = fine.as_ref().and_then(|f| f[i]);
            let _ = writeln!(s, "{i},{name},{},{}", fmt(coarse[i]), fmt(f));
        }
        let fine_m = self.fine.as_ref();
        let _ = writeln!(
            s,
            "summary,miou,{},{}",
            fmt(self.coarse.miou().ok()),
            fmt(fine_m.and_then(|m| m.miou().ok()))
        );
        let _ = writeln!(
            s,
            "summary,pixel_accuracy,{},{}",
            fmt(self.coarse.pixel_accuracy().ok()),
            fmt(fine_m.and_then(|m| m.pixel_accuracy().ok()))
        );
        s
    }
}

/// Worker count: `ACFSEG_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("ACFSEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or_else(|| std::thread::available_parallelism().ok().map(usize::from))
        .unwrap_or(1)
        .max(1)
}

fn evaluate_chunk(model: &Model, samples: &[Sample], cfg: &EvalConfig) -> Result<(ConfusionMatrix, Option<ConfusionMatrix>)> {
    let n = model.config().num_classes;
    let mut coarse = ConfusionMatrix::new(n);
    let mut fine = model.config().variant.has_fine_head().then(|| ConfusionMatrix::new(n));
    for s in samples {
        let (c, h, w) = match s.image.shape() {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::shape("evaluate", format!("expected 3×H×W image, got {other:?}"))),
        };
        let image = s.image.clone().reshape(&[1, c, h, w])?;
        let probs = ms_flip_infer(model, &image, cfg)?;
        coarse.add(&s.label.data, &argmax_channels(&probs.coarse)?, IGNORE_ID)?;
        if let (Some(m), Some(p)) = (fine.as_mut(), probs.fine.as_ref()) {
            m.add(&s.label.data, &argmax_channels(p)?, IGNORE_ID)?;
        }
    }
    Ok((coarse, fine))
}

/// Evaluate coarse and fine predictions, splitting images over at most
/// [`worker_threads`] threads. Counts are integers, so the result does not
/// depend on the split.
pub fn evaluate(model: &Model, samples: &[Sample], class_names: &[String], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let n = model.config().num_classes;
    if class_names.len() != n {
        return Err(Error::invalid(format!("{} class names for {n} classes", class_names.len())));
    }
    let threads = worker_threads().min(samples.len());
    let parts: Vec<Result<(ConfusionMatrix, Option<ConfusionMatrix>)>> = if threads <= 1 {
        vec![evaluate_chunk(model, samples, cfg)]
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| scope.spawn(move || evaluate_chunk(model, c, cfg)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut report = EvalReport {
        class_names: class_names.to_vec(),
        coarse: ConfusionMatrix::new(n),
        fine: model.config().variant.has_fine_head().then(|| ConfusionMatrix::new(n)),
    };
    for part in parts {
        let (c, f) = part?;
        report.coarse.merge(&c)?;
        if let (Some(m), Some(f)) = (report.fine.as_mut(), f.as_ref()) {
            m.merge(f)?;
        }
    }
    Ok(report)
}
