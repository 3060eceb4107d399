//! Class-balanced cross entropy, online bootstrapping, and the weighted sum
//! of the auxiliary, coarse, and fine losses.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Weights of the auxiliary, coarse, and fine terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aux: 0.4,
            coarse: 0.6,
            fine: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.aux, self.coarse, self.fine].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// `λa·la + λc·lc + λf·lf`; a missing fine term (baseline) is dropped.
pub fn total_loss(aux: f64, coarse: f64, fine: Option<f64>, w: &LossWeights) -> f64 {
    w.aux * aux + w.coarse * coarse + fine.map_or(0.0, |f| w.fine * f)
}

/// Graph version of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, aux: Var, coarse: Var, fine: Option<Var>, w: &LossWeights) -> Result<Var> {
    let a = g.scale(aux, w.aux as f32)?;
    let c = g.scale(coarse, w.coarse as f32)?;
    let mut t = g.add(a, c)?;
    if let Some(f) = fine {
        let f = g.scale(f, w.fine as f32)?;
        t = g.add(t, f)?;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub enabled: bool,
    /// Pixels whose correct-class probability is below this are "hard".
    pub theta: f32,
    /// Minimum number of pixels kept per batch.
    pub min_k: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            enabled: false,
            theta: 0.7,
            min_k: 100_000,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::invalid(format!("bootstrap theta {} outside (0, 1]", self.theta)));
        }
        if self.min_k == 0 {
            return Err(Error::invalid("bootstrap min_k must be >= 1"));
        }
        Ok(())
    }
}

/// Pick the hard pixels: those with correct-class probability below θ, or
/// the `min_k` lowest-probability pixels when fewer than `min_k` are hard.
/// `None` marks an ignored pixel, which is never selected. When there are at
/// most `min_k` candidates, all of them are kept.
pub fn bootstrap_select(prob_on_correct: &[Option<f32>], cfg: &BootstrapConfig) -> Vec<bool> {
    let mut mask: Vec<bool> = prob_on_correct
        .iter()
        .map(|p| p.is_some_and(|p| p < cfg.theta))
        .collect();
    let hard = mask.iter().filter(|&&m| m).count();
    if hard >= cfg.min_k {
        return mask;
    }
    let mut candidates: Vec<(usize, f32)> = prob_on_correct
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    if candidates.len() > cfg.min_k {
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        candidates.truncate(cfg.min_k);
    }
    mask.iter_mut().for_each(|m| *m = false);
    for (i, _) in candidates {
        mask[i] = true;
    }
    mask
}

/// Per-batch inverse-frequency weights `total / (N·count_i)`, clamped to
/// `[0.1, 10]`; classes absent from the batch get weight 1.
pub fn class_weights(labels: &[u8], num_classes: usize, ignore: u8) -> Vec<f32> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for &l in labels {
        if l != ignore && (l as usize) < num_classes {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (total as f32 / (num_classes * c) as f32).clamp(0.1, 10.0)
            }
        })
        .collect()
}

/// Probability of the labelled class at every pixel of `B×N×H×W` logits;
/// `None` for ignored pixels.
pub fn prob_on_correct(g: &Graph, logits: Var, labels: &[u8], ignore: u8) -> Result<Vec<Option<f32>>> {
    let t = g.value(logits);
    let (b, n, h, w) = t.dims4()?;
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(Error::shape("prob_on_correct", format!("{} labels for {} pixels", labels.len(), b * hw)));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let l = labels[bi * hw + p];
            if l == ignore {
                out.push(None);
                continue;
            }
            let at = |c: usize| d[(bi * n + c) * hw + p];
            let mx = (0..n).map(at).fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = (0..n).map(|c| (at(c) - mx).exp()).sum();
            out.push(Some((at(l as usize) - mx).exp() / sum));
        }
    }
    Ok(out)
}

/// Mean over the selected, non-ignored pixels of `w_y·(−log softmax_y)`.
/// `mask` restricts the pixels further (bootstrapping). No selected pixels
/// gives a zero loss with zero gradient.
pub fn balanced_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[u8],
    ignore: u8,
    weights: &[f32],
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (b, n, h, w) = g.value(logits).dims4()?;
    let npix = b * h * w;
    if labels.len() != npix || mask.is_some_and(|m| m.len() != npix) {
        return Err(Error::shape("balanced_ce", format!("{} labels for {npix} pixels", labels.len())));
    }
    if weights.len() != n {
        return Err(Error::shape("balanced_ce", format!("{} class weights for {n} classes", weights.len())));
    }
    let mut targets = vec![0usize; npix];
    let mut pix_w = vec![0.0f32; npix];
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if l as usize >= n {
            return Err(Error::invalid(format!("label {l} outside [0, {n}) and not the ignore id {ignore}")));
        }
        targets[i] = l as usize;
        pix_w[i] = weights[l as usize];
        count += 1;
    }
    g.softmax_cross_entropy(logits, &targets, &pix_w, count as f32)
}
