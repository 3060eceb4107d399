//! The segmentation network: a small dilated backbone with output stride 8,
//! an optional ASPP context head, auxiliary and coarse heads, and the ACF
//! fine head.

use crate::acf::{AcfModule, AcfVariant, CoarseProbs};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, ConvSpec, ParamStore, Session};
use crate::tensor::Tensor;
use rand::Rng;

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    /// Stage widths are `base·{1, 2, 4, 4}`.
    pub base_channels: usize,
    /// `C′`, the channel count inside the ACF module.
    pub reduced_channels: usize,
    /// Hidden width of the auxiliary and coarse heads.
    pub head_channels: usize,
    pub use_aspp: bool,
    /// Dilations of the three 3×3 ASPP branches (the fourth branch is 1×1).
    pub aspp_dilations: Vec<usize>,
    pub aspp_channels: usize,
    pub variant: AcfVariant,
    pub output_stride: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 4,
            base_channels: 16,
            reduced_channels: 32,
            head_channels: 32,
            use_aspp: false,
            aspp_dilations: vec![2, 4, 6],
            aspp_channels: 32,
            variant: AcfVariant::Sum,
            output_stride: OUTPUT_STRIDE,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.reduced_channels == 0 || self.base_channels == 0 || self.head_channels == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if self.output_stride != OUTPUT_STRIDE {
            return Err(Error::invalid(format!(
                "output stride is fixed at {OUTPUT_STRIDE}, got {}",
                self.output_stride
            )));
        }
        if self.use_aspp {
            if self.aspp_dilations.len() != 3 || self.aspp_dilations.contains(&0) {
                return Err(Error::invalid(
                    "ASPP needs exactly three positive dilations for its 3×3 branches",
                ));
            }
            if self.aspp_channels == 0 {
                return Err(Error::invalid("aspp_channels must be >= 1"));
            }
        }
        Ok(())
    }

    fn top_channels(&self) -> usize {
        if self.use_aspp {
            self.aspp_channels
        } else {
            4 * self.base_channels
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: [Vec<ConvBnRelu>; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, base: usize, rng: &mut impl Rng) -> Result<Self> {
        let (c1, c2, c3) = (base, 2 * base, 4 * base);
        let mut layer = |name: &str, spec: ConvSpec| ConvBnRelu::new(store, &format!("backbone.{name}"), spec, rng);
        let stages = [
            vec![
                layer("s1.c1", ConvSpec::new(3, c1, 3).stride(2))?,
                layer("s1.c2", ConvSpec::new(c1, c1, 3))?,
            ],
            vec![
                layer("s2.c1", ConvSpec::new(c1, c2, 3).stride(2))?,
                layer("s2.c2", ConvSpec::new(c2, c2, 3).stride(2))?,
                layer("s2.c3", ConvSpec::new(c2, c2, 3))?,
            ],
            vec![
                layer("s3.c1", ConvSpec::new(c2, c3, 3).dilation(2))?,
                layer("s3.c2", ConvSpec::new(c3, c3, 3).dilation(2))?,
            ],
            vec![
                layer("s4.c1", ConvSpec::new(c3, c3, 3).dilation(4))?,
                layer("s4.c2", ConvSpec::new(c3, c3, 3).dilation(4))?,
            ],
        ];
        Ok(Backbone { stages })
    }

    /// Returns `(mid, top)`: the stage-3 and stage-4 outputs, both at 1/8
    /// of the input resolution.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<(Var, Var)> {
        let mut x = image;
        let mut mid = image;
        for (i, stage) in self.stages.iter().enumerate() {
            for l in stage {
                x = l.forward(s, x)?;
            }
            if i == 2 {
                mid = x;
            }
        }
        Ok((mid, x))
    }
}

/// Four parallel branches (one 1×1, three dilated 3×3), concatenated and
/// projected by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub dilations: Vec<usize>,
    branches: Vec<ConvBnRelu>,
    project: ConvBnRelu,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, cin: usize, cb: usize, dilations: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut branches = vec![ConvBnRelu::new(store, "aspp.b0", ConvSpec::new(cin, cb, 1), rng)?];
        for (i, &d) in dilations.iter().enumerate() {
            branches.push(ConvBnRelu::new(
                store,
                &format!("aspp.b{}", i + 1),
                ConvSpec::new(cin, cb, 3).dilation(d),
                rng,
            )?);
        }
        let project = ConvBnRelu::new(store, "aspp.project", ConvSpec::new(4 * cb, cb, 1), rng)?;
        Ok(Aspp {
            dilations: dilations.to_vec(),
            branches,
            project,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (_, _, h, w) = s.g.value(x).dims4()?;
        if let Some(&d) = self.dilations.iter().find(|&&d| d >= h.min(w)) {
            return Err(Error::invalid(format!(
                "{h}x{w} feature map is too small for ASPP dilation {d}: every off-centre tap \
                 falls in padding; lower aspp_dilations below {} or use larger inputs",
                h.min(w)
            )));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.g.concat(&outs, 1)?;
        self.project.forward(s, cat)
    }
}

/// 3×3 conv + batch norm + ReLU, then a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct SegHead {
    hidden: ConvBnRelu,
    classifier: Conv,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(SegHead {
            hidden: ConvBnRelu::new(store, &format!("{name}.hidden"), ConvSpec::new(cin, hidden, 3), rng)?,
            classifier: Conv::new(store, &format!("{name}.cls"), ConvSpec::new(hidden, n, 1), true, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        self.classifier.forward(s, h)
    }
}

/// Upsample a 1/8-resolution map to `h×w`. Three stride-2 convolutions
/// with padding 1 centre feature cell `i` on input pixel `8i`, so the map is
/// interpolated with align-corners onto pixels `0, 8, …, 8(n−1)` and the
/// last seven rows and columns repeat the final cell.
pub fn upsample_to_input(g: &mut Graph, low: Var, h: usize, w: usize) -> Result<Var> {
    let (_, _, lh, lw) = g.value(low).dims4()?;
    if lh * OUTPUT_STRIDE != h || lw * OUTPUT_STRIDE != w {
        return Err(Error::shape("upsample_to_input", format!("{lh}x{lw} map for a {h}x{w} input")));
    }
    let (th, tw) = (OUTPUT_STRIDE * (lh - 1) + 1, OUTPUT_STRIDE * (lw - 1) + 1);
    let up = g.upsample_bilinear(low, th, tw, true)?;
    g.pad_edge(up, h - th, w - tw)
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Logits at input resolution.
    pub aux: Var,
    pub coarse: Var,
    pub fine: Option<Var>,
    /// Feature-resolution values.
    pub top_feature: Var,
    pub coarse_logits_low: Var,
    pub coarse_probs_low: Option<Var>,
    pub fine_feature: Option<Var>,
}

/// Logits of one inference pass, upsampled to the input size.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub aux_logits: Tensor,
    pub coarse_logits: Tensor,
    pub fine_logits: Option<Tensor>,
}

impl ForwardOutputs {
    /// The network's final prediction: fine logits when present.
    pub fn final_logits(&self) -> &Tensor {
        self.fine_logits.as_ref().unwrap_or(&self.coarse_logits)
    }
}

/// Layer layout; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub backbone: Backbone,
    pub aspp: Option<Aspp>,
    pub aux_head: SegHead,
    pub coarse_head: SegHead,
    pub acf: Option<AcfModule>,
    pub fine_classifier: Option<Conv>,
}

impl Network {
    pub fn new(config: NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.num_classes;
        let base = config.base_channels;
        let backbone = Backbone::new(store, base, rng)?;
        let aspp = if config.use_aspp {
            Some(Aspp::new(store, 4 * base, config.aspp_channels, &config.aspp_dilations, rng)?)
        } else {
            None
        };
        let top = config.top_channels();
        let aux_head = SegHead::new(store, "aux", 4 * base, config.head_channels, n, rng)?;
        let coarse_head = SegHead::new(store, "coarse", top, config.head_channels, n, rng)?;
        let (acf, fine_classifier) = if config.variant.has_fine_head() {
            let c = config.reduced_channels;
            let acf = AcfModule::new(store, "acf", config.variant, top, c, n, c, rng)?;
            let cls = Conv::new(store, "fine.cls", ConvSpec::new(c, n, 1), true, rng)?;
            (Some(acf), Some(cls))
        } else {
            (None, None)
        };
        Ok(Network {
            config,
            backbone,
            aspp,
            aux_head,
            coarse_head,
            acf,
            fine_classifier,
        })
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<ForwardVars> {
        let (_, c, h, w) = s.g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("expected a 3-channel image, got {c}")));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image size {h}x{w} must be a positive multiple of {OUTPUT_STRIDE}"
            )));
        }
        let (mid, top) = self.backbone.forward(s, image)?;
        let top = match &self.aspp {
            Some(a) => a.forward(s, top)?,
            None => top,
        };
        let aux_low = self.aux_head.forward(s, mid)?;
        let coarse_low = self.coarse_head.forward(s, top)?;
        let aux = upsample_to_input(&mut s.g, aux_low, h, w)?;
        let coarse = upsample_to_input(&mut s.g, coarse_low, h, w)?;
        let (fine, fine_feature, probs) = match (&self.acf, &self.fine_classifier) {
            (Some(acf), Some(cls)) => {
                let probs = CoarseProbs::from_logits(&mut s.g, coarse_low)?;
                let out = acf.forward(s, top, probs)?;
                let fine_low = cls.forward(s, out.fused)?;
                let fine = upsample_to_input(&mut s.g, fine_low, h, w)?;
                (Some(fine), Some(out.fused), Some(probs.var()))
            }
            _ => (None, None, None),
        };
        Ok(ForwardVars {
            aux,
            coarse,
            fine,
            top_feature: top,
            coarse_logits_low: coarse_low,
            coarse_probs_low: probs,
            fine_feature,
        })
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::new(config, &mut params, rng)?;
        Ok(Model { network, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.network.config
    }

    /// Eval-mode forward pass without gradients.
    pub fn infer(&self, image: &Tensor) -> Result<ForwardOutputs> {
        let mut s = Session::eval(&self.params);
        let x = s.g.constant(image.clone());
        let v = self.network.forward(&mut s, x)?;
        Ok(ForwardOutputs {
            aux_logits: s.g.value(v.aux).clone(),
            coarse_logits: s.g.value(v.coarse).clone(),
            fine_logits: v.fine.map(|f| s.g.value(f).clone()),
        })
    }

    /// Eval-mode pre-classifier features at 1/8 resolution:
    /// `(top feature, fused fine feature)`.
    pub fn features(&self, image: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut s = Session::eval(&self.params);
        let x = s.g.constant(image.clone());
        let v = self.network.forward(&mut s, x)?;
        Ok((
            s.g.value(v.top_feature).clone(),
            v.fine_feature.map(|f| s.g.value(f).clone()),
        ))
    }
}
