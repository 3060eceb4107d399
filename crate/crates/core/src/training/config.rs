use super::augment::AugmentConfig;
use super::loss::{BootstrapConfig, LossWeights};
use crate::acf::AcfVariant;
use crate::config::{parse_bool, KvFile};
use crate::data::IGNORE_ID;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use std::path::Path;

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub max_iter: usize,
    pub lr: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub poly_power: f64,
    pub loss: LossWeights,
    pub bootstrap: BootstrapConfig,
    pub augment: AugmentConfig,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// 0 evaluates only after the last iteration.
    pub eval_every: usize,
    pub seed: u64,
    /// Data loading is always single-threaded, so this only records intent.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            batch_size: 4,
            max_iter: 1000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            loss: LossWeights::default(),
            bootstrap: BootstrapConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 200,
            eval_every: 200,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: batch 8, crop 768, 40k iterations, ASPP,
    /// bootstrapping with θ = 0.7 and K = 100 000. Crop 768 rather than 769
    /// because input sizes must be multiples of the output stride.
    pub fn full_scale() -> Self {
        let mut c = TrainConfig::default();
        c.network.use_aspp = true;
        c.network.aspp_dilations = vec![12, 24, 36];
        c.network.num_classes = 19;
        c.batch_size = 8;
        c.max_iter = 40_000;
        c.augment.crop = 768;
        c.bootstrap = BootstrapConfig {
            enabled: true,
            theta: 0.7,
            min_k: 100_000,
        };
        c.checkpoint_every = 2000;
        c.eval_every = 2000;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.bootstrap.validate()?;
        if self.batch_size == 0 || self.max_iter == 0 {
            return Err(Error::invalid("batch_size and max_iter must be >= 1"));
        }
        if self.batch_size * self.augment.crop * self.augment.crop < 2 {
            return Err(Error::invalid("batch norm needs at least two values per channel"));
        }
        if self.augment.crop == 0 || !self.augment.crop.is_multiple_of(self.network.output_stride) {
            return Err(Error::invalid(format!(
                "crop {} must be a positive multiple of {}",
                self.augment.crop, self.network.output_stride
            )));
        }
        if !(self.augment.scale_min > 0.0 && self.augment.scale_min <= self.augment.scale_max) {
            return Err(Error::invalid("need 0 < scale_min <= scale_max"));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) || !(self.poly_power >= 0.0) {
            return Err(Error::invalid("lr, momentum, weight_decay and poly_power must be >= 0"));
        }
        Ok(())
    }

    /// Parse a config file on top of `base`. Unknown keys are errors.
    pub fn parse_onto(base: TrainConfig, text: &str, source: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text, source)?;
        let mut profile = String::from("default");
        kv.take("profile", &mut profile)?;
        let mut c = match profile.as_str() {
            "default" => base,
            "full" => TrainConfig::full_scale(),
            other => return Err(Error::invalid(format!("unknown profile `{other}`"))),
        };
        let n = &mut c.network;
        kv.take("num_classes", &mut n.num_classes)?;
        kv.take("base_channels", &mut n.base_channels)?;
        kv.take("reduced_channels", &mut n.reduced_channels)?;
        kv.take("head_channels", &mut n.head_channels)?;
        kv.take_with("use_aspp", &mut n.use_aspp, parse_bool)?;
        kv.take_list("aspp_dilations", &mut n.aspp_dilations)?;
        kv.take("aspp_channels", &mut n.aspp_channels)?;
        kv.take_with("variant", &mut n.variant, AcfVariant::parse)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("max_iter", &mut c.max_iter)?;
        kv.take("lr", &mut c.lr)?;
        kv.take("momentum", &mut c.momentum)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("poly_power", &mut c.poly_power)?;
        kv.take("lambda_aux", &mut c.loss.aux)?;
        kv.take("lambda_coarse", &mut c.loss.coarse)?;
        kv.take("lambda_fine", &mut c.loss.fine)?;
        kv.take_with("bootstrap", &mut c.bootstrap.enabled, parse_bool)?;
        kv.take("bootstrap_theta", &mut c.bootstrap.theta)?;
        kv.take("bootstrap_min_k", &mut c.bootstrap.min_k)?;
        kv.take_with("flip", &mut c.augment.flip, parse_bool)?;
        kv.take("scale_min", &mut c.augment.scale_min)?;
        kv.take("scale_max", &mut c.augment.scale_max)?;
        kv.take("crop", &mut c.augment.crop)?;
        kv.take("checkpoint_every", &mut c.checkpoint_every)?;
        kv.take("eval_every", &mut c.eval_every)?;
        kv.take("seed", &mut c.seed)?;
        kv.take_with("deterministic", &mut c.deterministic, parse_bool)?;
        kv.finish()?;
        c.augment.ignore_id = IGNORE_ID;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::parse_onto(TrainConfig::default(), text, source)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
