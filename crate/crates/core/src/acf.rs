//! Attentional class features.
//!
//! The coarse segmentation doubles as an attention map. Class centers are
//! the probability-weighted mean feature of each class over one image;
//! every pixel then gathers the centers weighted by its own coarse class
//! probabilities, either summed into `C′` channels or concatenated into
//! `N·C′` class-major channels. The result is concatenated with the reduced
//! base feature and fused by a 1×1 conv.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ConvSpec, ParamStore, Session};
use crate::tensor::Tensor;
use rand::Rng;

/// Added to the per-class probability mass before normalizing, so a class
/// with no mass gets a zero center instead of a division by zero.
pub const CENTER_EPS: f32 = 1e-6;

/// Softmax probabilities `B×N×H×W` over the class axis.
#[derive(Clone, Copy, Debug)]
pub struct CoarseProbs(Var);

impl CoarseProbs {
    /// Softmax of coarse logits over the class axis.
    pub fn from_logits(g: &mut Graph, logits: Var) -> Result<Self> {
        g.value(logits).dims4()?;
        Ok(CoarseProbs(g.softmax(logits, 1)?))
    }

    /// Wrap an existing probability map after checking it is non-negative
    /// and sums to one (within 1e-5) at every pixel.
    pub fn new(g: &Graph, probs: Var) -> Result<Self> {
        let t = g.value(probs);
        let (b, n, h, w) = t.dims4()?;
        let hw = h * w;
        let d = t.data();
        for bi in 0..b {
            for p in 0..hw {
                let mut s = 0.0f32;
                for c in 0..n {
                    let v = d[(bi * n + c) * hw + p];
                    if v < 0.0 {
                        return Err(Error::invalid(format!("negative probability {v}")));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!(
                        "probabilities at batch {bi}, pixel {p} sum to {s}"
                    )));
                }
            }
        }
        Ok(CoarseProbs(probs))
    }

    pub fn var(self) -> Var {
        self.0
    }
}

/// Class centers `B×N×C′`.
#[derive(Clone, Copy, Debug)]
pub struct ClassCenters(Var);

impl ClassCenters {
    /// Wrap an existing `B×N×C′` value.
    pub fn new(g: &Graph, centers: Var) -> Result<Self> {
        if g.shape(centers).len() != 3 {
            return Err(Error::shape("ClassCenters::new", format!("expected B×N×C′, got {:?}", g.shape(centers))));
        }
        Ok(ClassCenters(centers))
    }

    pub fn var(self) -> Var {
        self.0
    }
}

/// Per-pixel attentional class feature, `B×C′×H×W` (sum) or
/// `B×(N·C′)×H×W` (concat).
#[derive(Clone, Copy, Debug)]
pub struct AttentionalFeature(Var);

impl AttentionalFeature {
    pub fn var(self) -> Var {
        self.0
    }
}

fn probs_dims(g: &Graph, probs: CoarseProbs) -> (usize, usize, usize, usize) {
    g.value(probs.0).dims4().expect("CoarseProbs is rank 4")
}

/// `center_i = Σ_j P[i,j]·F′_j / (Σ_j P[i,j] + ε)`, computed as a batched
/// matrix product of `P (N×HW)` and `F′ᵀ (HW×C′)` followed by row scaling.
pub fn class_center(g: &mut Graph, feature: Var, probs: CoarseProbs) -> Result<ClassCenters> {
    let (b, c, h, w) = g.value(feature).dims4()?;
    let (pb, n, ph, pw) = probs_dims(g, probs);
    if (pb, ph, pw) != (b, h, w) {
        return Err(Error::shape(
            "class_center",
            format!("feature {:?} vs probs {:?}", g.shape(feature), g.shape(probs.0)),
        ));
    }
    let hw = h * w;
    let p = g.reshape(probs.0, &[b, n, hw])?;
    let f = g.reshape(feature, &[b, c, hw])?;
    let ft = g.transpose(f, &[0, 2, 1])?;
    let weighted = g.bmm(p, ft)?;
    let mass = g.sum_axis(p, 2)?;
    let mass = g.add_scalar(mass, CENTER_EPS)?;
    let inv = g.recip(mass)?;
    Ok(ClassCenters(g.scale_rows(weighted, inv)?))
}

fn check_attention_shapes(g: &Graph, centers: ClassCenters, probs: CoarseProbs) -> Result<(usize, usize, usize, usize, usize)> {
    let cs = g.shape(centers.0);
    let (b, n, h, w) = probs_dims(g, probs);
    if cs.len() != 3 || cs[0] != b || cs[1] != n {
        return Err(Error::shape(
            "class_attention",
            format!("centers {cs:?} vs probs {:?}", g.shape(probs.0)),
        ));
    }
    Ok((b, n, cs[2], h, w))
}

/// `F_a[j] = Σ_i P[i,j]·center_i`, i.e. `centersᵀ (C′×N) · P (N×HW)`.
/// Returns the feature before the refining conv.
pub fn class_attention_sum(g: &mut Graph, centers: ClassCenters, probs: CoarseProbs) -> Result<AttentionalFeature> {
    let (b, n, c, h, w) = check_attention_shapes(g, centers, probs)?;
    let ct = g.transpose(centers.0, &[0, 2, 1])?;
    let p = g.reshape(probs.0, &[b, n, h * w])?;
    let fa = g.bmm(ct, p)?;
    Ok(AttentionalFeature(g.reshape(fa, &[b, c, h, w])?))
}

/// `F_a[j] = concat_i P[i,j]·center_i`, class-major: channels
/// `i·C′..(i+1)·C′` hold class `i`. Returns the feature before refining.
pub fn class_attention_concat(g: &mut Graph, centers: ClassCenters, probs: CoarseProbs) -> Result<AttentionalFeature> {
    let (b, n, c, h, w) = check_attention_shapes(g, centers, probs)?;
    let hw = h * w;
    let (cd, pd) = (g.value(centers.0).data(), g.value(probs.0).data());
    let mut out = vec![0.0f32; b * n * c * hw];
    for bi in 0..b {
        for i in 0..n {
            let prow = &pd[(bi * n + i) * hw..(bi * n + i + 1) * hw];
            for ch in 0..c {
                let center = cd[(bi * n + i) * c + ch];
                let dst = &mut out[((bi * n + i) * c + ch) * hw..((bi * n + i) * c + ch + 1) * hw];
                for (d, &pv) in dst.iter_mut().zip(prow) {
                    *d = pv * center;
                }
            }
        }
    }
    let v = Tensor::new(&[b, n * c, h, w], out)?;
    let var = g.custom("class_attention_concat", &[centers.0, probs.0], v, move |args| {
        let (cd, pd, gd) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
        let mut dc = vec![0.0f32; b * n * c];
        let mut dp = vec![0.0f32; b * n * hw];
        for bi in 0..b {
            for i in 0..n {
                for ch in 0..c {
                    let grow = &gd[((bi * n + i) * c + ch) * hw..((bi * n + i) * c + ch + 1) * hw];
                    let prow = &pd[(bi * n + i) * hw..(bi * n + i + 1) * hw];
                    dc[(bi * n + i) * c + ch] = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    let center = cd[(bi * n + i) * c + ch];
                    for (d, &gv) in dp[(bi * n + i) * hw..(bi * n + i + 1) * hw].iter_mut().zip(grow) {
                        *d += gv * center;
                    }
                }
            }
        }
        vec![
            args.needs[0].then(|| Tensor::new(&[b, n, c], dc).expect("shape")),
            args.needs[1].then(|| Tensor::new(&[b, n, h, w], dp).expect("shape")),
        ]
    })?;
    Ok(AttentionalFeature(var))
}

/// Class centers broadcast to every pixel as `B×(N·C′)×H×W`, used when the
/// attention block is removed.
pub fn broadcast_centers(g: &mut Graph, centers: ClassCenters, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(centers.0).to_vec();
    let flat = g.reshape(centers.0, &[s[0], s[1] * s[2], 1, 1])?;
    g.upsample_bilinear(flat, h, w, true)
}

/// Which attentional feature feeds the fusion head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcfVariant {
    /// Base network only; no fine head.
    None,
    /// Broadcast class centers, no attention.
    CenterOnly,
    Sum,
    Concat,
}

impl AcfVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(AcfVariant::None),
            "center-only" | "center_only" => Ok(AcfVariant::CenterOnly),
            "sum" => Ok(AcfVariant::Sum),
            "concat" => Ok(AcfVariant::Concat),
            _ => Err(Error::invalid(format!(
                "unknown variant `{s}` (expected none, center-only, sum, concat)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AcfVariant::None => "none",
            AcfVariant::CenterOnly => "center-only",
            AcfVariant::Sum => "sum",
            AcfVariant::Concat => "concat",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            AcfVariant::None => 0,
            AcfVariant::CenterOnly => 1,
            AcfVariant::Sum => 2,
            AcfVariant::Concat => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => AcfVariant::None,
            1 => AcfVariant::CenterOnly,
            2 => AcfVariant::Sum,
            3 => AcfVariant::Concat,
            _ => return Err(Error::invalid(format!("unknown variant code {code}"))),
        })
    }

    pub fn has_fine_head(self) -> bool {
        self != AcfVariant::None
    }
}

/// Channel-reduce, class-center, attention, refine, and fuse.
#[derive(Clone, Debug)]
pub struct AcfModule {
    pub variant: AcfVariant,
    pub num_classes: usize,
    pub reduced: usize,
    pub reduce: ConvBnRelu,
    pub refine: Option<ConvBnRelu>,
    pub fuse: ConvBnRelu,
}

/// Intermediate values of one ACF pass.
#[derive(Clone, Copy, Debug)]
pub struct AcfOutput {
    pub reduced: Var,
    pub centers: ClassCenters,
    /// Attentional feature before refining; `None` for the center-only variant.
    pub attention: Option<AttentionalFeature>,
    /// Fused feature fed to the fine classifier.
    pub fused: Var,
}

impl AcfModule {
    /// `in_channels` is the channel count of the base feature; the fused
    /// output has `out_channels`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: AcfVariant,
        in_channels: usize,
        reduced: usize,
        num_classes: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if variant == AcfVariant::None {
            return Err(Error::invalid("the baseline variant has no ACF module"));
        }
        if reduced == 0 {
            return Err(Error::invalid("reduced channel count must be >= 1"));
        }
        let reduce = ConvBnRelu::new(store, &format!("{name}.reduce"), ConvSpec::new(in_channels, reduced, 1), rng)?;
        let attn_channels = match variant {
            AcfVariant::Sum => reduced,
            _ => num_classes * reduced,
        };
        let refine = match variant {
            AcfVariant::Sum | AcfVariant::Concat => Some(ConvBnRelu::new(
                store,
                &format!("{name}.refine"),
                ConvSpec::new(attn_channels, attn_channels, 1),
                rng,
            )?),
            _ => None,
        };
        let fuse = ConvBnRelu::new(
            store,
            &format!("{name}.fuse"),
            ConvSpec::new(attn_channels + reduced, out_channels, 1),
            rng,
        )?;
        Ok(AcfModule {
            variant,
            num_classes,
            reduced,
            reduce,
            refine,
            fuse,
        })
    }

    pub fn fuse_in_channels(&self) -> usize {
        match self.variant {
            AcfVariant::Sum => 2 * self.reduced,
            _ => (self.num_classes + 1) * self.reduced,
        }
    }

    pub fn forward(&self, s: &mut Session, feature: Var, probs: CoarseProbs) -> Result<AcfOutput> {
        let reduced = self.reduce.forward(s, feature)?;
        let centers = class_center(&mut s.g, reduced, probs)?;
        let (_, _, h, w) = s.g.value(reduced).dims4()?;
        let (attention, context) = match self.variant {
            AcfVariant::Sum | AcfVariant::Concat => {
                let fa = if self.variant == AcfVariant::Sum {
                    class_attention_sum(&mut s.g, centers, probs)?
                } else {
                    class_attention_concat(&mut s.g, centers, probs)?
                };
                let refined = self.refine.as_ref().expect("attention variants refine").forward(s, fa.var())?;
                (Some(fa), refined)
            }
            AcfVariant::CenterOnly => (None, broadcast_centers(&mut s.g, centers, h, w)?),
            AcfVariant::None => unreachable!("constructor rejects the baseline"),
        };
        let fused = fuse(s, &self.fuse, context, reduced)?;
        Ok(AcfOutput {
            reduced,
            centers,
            attention,
            fused,
        })
    }
}

/// Concatenate the attentional feature with the base feature along channels
/// and apply `head` (1×1 conv, batch norm, ReLU).
pub fn fuse(s: &mut Session, head: &ConvBnRelu, attentional: Var, base: Var) -> Result<Var> {
    let (ab, _, ah, aw) = s.g.value(attentional).dims4()?;
    let (bb, _, bh, bw) = s.g.value(base).dims4()?;
    if (ab, ah, aw) != (bb, bh, bw) {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", s.g.shape(attentional), s.g.shape(base)),
        ));
    }
    let cat = s.g.concat(&[attentional, base], 1)?;
    head.forward(s, cat)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Features for four pixels laid out 2×2: p0=(1,0), p1=(3,0), p2=(0,2), p3=(0,4).
    fn feature() -> Tensor {
        Tensor::new(&[1, 2, 2, 2], vec![1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 4.0]).unwrap()
    }

    fn probs(per_pixel: &[[f32; 2]; 4]) -> Tensor {
        let mut d = vec![0.0; 8];
        for (p, pr) in per_pixel.iter().enumerate() {
            d[p] = pr[0];
            d[4 + p] = pr[1];
        }
        Tensor::new(&[1, 2, 2, 2], d).unwrap()
    }

    fn centers_of(probs_t: Tensor) -> Vec<f32> {
        let mut g = Graph::new();
        let f = g.constant(feature());
        let pv = g.constant(probs_t);
        let p = CoarseProbs::new(&g, pv).unwrap();
        let c = class_center(&mut g, f, p).unwrap();
        g.value(c.var()).data().to_vec()
    }

    fn close(a: &[f32], b: &[f32]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-5, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn one_hot_centers_are_class_means() {
        let c = centers_of(probs(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]));
        close(&c, &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn uniform_probs_give_global_mean() {
        let c = centers_of(probs(&[[0.5, 0.5]; 4]));
        close(&c, &[1.0, 1.5, 1.0, 1.5]);
    }

    #[test]
    fn soft_probs_centers() {
        let c = centers_of(probs(&[[0.5, 0.5], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]));
        close(&c, &[7.0 / 3.0, 0.0, 0.2, 2.4]);
    }

    #[test]
    fn absent_class_gets_zero_center() {
        let c = centers_of(probs(&[[1.0, 0.0]; 4]));
        close(&c, &[1.0, 1.5, 0.0, 0.0]);
    }

    fn attend(concat: bool, pixel: [f32; 2]) -> Vec<f32> {
        let mut g = Graph::new();
        let cv = g.constant(Tensor::new(&[1, 2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let pv = g.constant(Tensor::new(&[1, 2, 1, 1], pixel.to_vec()).unwrap());
        let p = CoarseProbs::new(&g, pv).unwrap();
        let fa = if concat {
            class_attention_concat(&mut g, ClassCenters(cv), p).unwrap()
        } else {
            class_attention_sum(&mut g, ClassCenters(cv), p).unwrap()
        };
        g.value(fa.var()).data().to_vec()
    }

    #[test]
    fn attention_sum_examples() {
        close(&attend(false, [1.0, 0.0]), &[2.0, 0.0]);
        close(&attend(false, [0.5, 0.5]), &[1.0, 1.5]);
    }

    #[test]
    fn attention_concat_examples() {
        close(&attend(true, [1.0, 0.0]), &[2.0, 0.0, 0.0, 0.0]);
        close(&attend(true, [0.5, 0.5]), &[1.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn probs_validation() {
        let mut g = Graph::new();
        let bad = g.constant(Tensor::full(&[1, 2, 1, 1], 0.7));
        assert!(CoarseProbs::new(&g, bad).is_err());
        let neg = g.constant(Tensor::new(&[1, 2, 1, 1], vec![1.5, -0.5]).unwrap());
        assert!(CoarseProbs::new(&g, neg).is_err());
    }

    #[test]
    fn mismatched_spatial_dims_rejected() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let pv = g.constant(Tensor::full(&[1, 2, 2, 2], 0.5));
        let p = CoarseProbs::new(&g, pv).unwrap();
        assert!(class_center(&mut g, f, p).is_err());
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in [AcfVariant::None, AcfVariant::CenterOnly, AcfVariant::Sum, AcfVariant::Concat] {
            assert_eq!(AcfVariant::parse(v.name()).unwrap(), v);
            assert_eq!(AcfVariant::from_code(v.code()).unwrap(), v);
        }
        assert!(AcfVariant::parse("mean").is_err());
    }
}
