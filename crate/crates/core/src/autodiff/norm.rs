use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

impl Graph {
    /// Batch normalization over the B, H, W axes of a `B×C×H×W` tensor.
    ///
    /// In train mode the running estimates become
    /// `momentum·running + (1 − momentum)·batch`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape(
                "batch_norm2d",
                format!(
                    "{c} channels but gamma {:?}, beta {:?}, stats {}",
                    self.shape(gamma),
                    self.shape(beta),
                    stats.channels()
                ),
            ));
        }
        let hw = h * w;
        let n = b * hw;
        if mode == BnMode::Train && n < 2 {
            return Err(Error::invalid(
                "batch_norm2d in train mode needs at least two values per channel",
            ));
        }
        let xd = self.value(x).data();
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Train => (0..c)
                .map(|ch| {
                    let mut s = 0.0f64;
                    for bi in 0..b {
                        let p = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        s += p.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut sq = 0.0f64;
                    for bi in 0..b {
                        let p = &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        sq += p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                    }
                    (m as f32, (sq / n as f64) as f32)
                })
                .unzip(),
            BnMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        if mode == BnMode::Train {
            let unbias = n as f32 / (n - 1) as f32;
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = momentum * *rm + (1.0 - momentum) * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = momentum * *rv + (1.0 - momentum) * var[ch] * unbias;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let start = (bi * c + ch) * hw;
                for j in start..start + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        self.custom("batch_norm2d", &[x, gamma, beta], v, move |args| {
            let g = args.grad.data();
            let gd = args.inputs[1].data();
            let mut sum_g = vec![0.0f32; c];
            let mut sum_gx = vec![0.0f32; c];
            for bi in 0..b {
                for ch in 0..c {
                    let start = (bi * c + ch) * hw;
                    for j in start..start + hw {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
            }
            let dx = args.needs[0].then(|| {
                let mut dx = vec![0.0f32; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * hw;
                        let scale = gd[ch] * inv_std[ch];
                        for j in start..start + hw {
                            dx[j] = match mode {
                                BnMode::Train => {
                                    scale * (g[j] - sum_g[ch] / n as f32 - xhat[j] * sum_gx[ch] / n as f32)
                                }
                                BnMode::Eval => scale * g[j],
                            };
                        }
                    }
                }
                Tensor::new(&[b, c, h, w], dx).expect("shape")
            });
            vec![
                dx,
                Some(Tensor::new(&[c], sum_gx).expect("shape")),
                Some(Tensor::new(&[c], sum_g).expect("shape")),
            ]
        })
    }
}
