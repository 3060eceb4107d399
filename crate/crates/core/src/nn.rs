//! Named parameters and the handful of layers the network is built from.
//!
//! Layers hold parameter *names*; the values live in a [`ParamStore`] so a
//! whole model can be checkpointed, copied, or shared between variants by
//! name. A [`Session`] binds each parameter into a [`Graph`] at most once per
//! forward pass, so reusing a layer accumulates into one gradient.

use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (conv weights only).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    stats: IndexMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad, decay });
        Ok(())
    }

    pub fn register_stats(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.stats.contains_key(name) {
            return Err(Error::invalid(format!("duplicate statistics `{name}`")));
        }
        self.stats.insert(name.to_string(), RunningStats::new(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn stats(&self, name: &str) -> Option<&RunningStats> {
        self.stats.get(name)
    }

    pub fn stats_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy every parameter and statistic that `other` also has (same name and
    /// shape). Returns how many tensors were copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(src) = other.params.get(name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        for (name, s) in self.stats.iter_mut() {
            if let Some(src) = other.stats.get(name) {
                if src.channels() == s.channels() {
                    *s = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

enum StatsAccess<'a> {
    Frozen(&'a ParamStore),
    Train(&'a mut ParamStore),
}

/// One forward pass: a graph plus the parameters bound into it.
pub struct Session<'a> {
    pub g: Graph,
    store: StatsAccess<'a>,
    bound: IndexMap<String, Var>,
    mode: BnMode,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl<'a> Session<'a> {
    /// Training pass: gradients recorded, batch-norm statistics updated.
    pub fn train(store: &'a mut ParamStore) -> Self {
        Self::build(Graph::new(), StatsAccess::Train(store), BnMode::Train)
    }

    /// Inference pass: no gradients, running statistics used.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(Graph::no_grad(), StatsAccess::Frozen(store), BnMode::Eval)
    }

    /// Eval-mode normalization but with gradients recorded.
    pub fn eval_with_grad(store: &'a ParamStore) -> Self {
        Self::build(Graph::new(), StatsAccess::Frozen(store), BnMode::Eval)
    }

    fn build(g: Graph, store: StatsAccess<'a>, mode: BnMode) -> Self {
        Session {
            g,
            store,
            bound: IndexMap::new(),
            mode,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    fn store(&self) -> &ParamStore {
        match &self.store {
            StatsAccess::Frozen(s) => s,
            StatsAccess::Train(s) => s,
        }
    }

    /// Graph handle for a named parameter, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store()
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .value
            .clone();
        let v = self.g.param(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn batch_norm(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.param(&bn.gamma)?;
        let beta = self.param(&bn.beta)?;
        let (mode, momentum, eps) = (self.mode, self.bn_momentum, self.bn_eps);
        let missing = || Error::invalid(format!("unknown statistics `{}`", bn.stats));
        match &mut self.store {
            StatsAccess::Train(store) => {
                let stats = store.stats.get_mut(&bn.stats).ok_or_else(missing)?;
                self.g.batch_norm2d(x, gamma, beta, stats, mode, momentum, eps)
            }
            StatsAccess::Frozen(store) => {
                let mut stats = store.stats.get(&bn.stats).ok_or_else(missing)?.clone();
                self.g.batch_norm2d(x, gamma, beta, &mut stats, mode, momentum, eps)
            }
        }
    }

    /// Parameters bound so far, in binding order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Add the graph gradients of every bound parameter into the store.
    pub fn accumulate_grads(&mut self) -> Result<()> {
        let StatsAccess::Train(store) = &mut self.store else {
            return Err(Error::invalid("accumulate_grads on an inference session"));
        };
        for (name, &v) in &self.bound {
            if let Some(g) = self.g.grad(v) {
                store.params.get_mut(name).expect("bound params exist").grad.add_assign(g);
            }
        }
        Ok(())
    }
}

/// He-normal initialization for a conv weight.
pub fn kaiming_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    /// "Same" padding for odd kernels at stride 1.
    fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = format!("{name}.weight");
        let w = kaiming_normal(&[spec.cout, spec.cin, spec.kernel, spec.kernel], rng);
        store.register(&weight, w, true)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.register(&b, Tensor::zeros(&[spec.cout]), false)?;
            Some(b)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding(),
            dilation: spec.dilation,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| s.param(b)).transpose()?;
        s.g.conv2d(x, w, b, self.stride, self.padding, self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub stats: String,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let bn = BatchNorm {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            stats: name.to_string(),
        };
        store.register(&bn.gamma, Tensor::full(&[channels], 1.0), false)?;
        store.register(&bn.beta, Tensor::zeros(&[channels]), false)?;
        store.register_stats(&bn.stats, channels)?;
        Ok(bn)
    }
}

/// Conv → optional batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvBnRelu {
    /// Conv without bias, batch norm, ReLU.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let conv = Conv::new(store, &format!("{name}.conv"), spec, false, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.cout)?;
        Ok(ConvBnRelu {
            conv,
            bn: Some(bn),
            relu: true,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(bn) = &self.bn {
            y = s.batch_norm(bn, y)?;
        }
        if self.relu {
            y = s.g.relu(y)?;
        }
        Ok(y)
    }
}
