//! Binary checkpoints of named tensors (little-endian):
//! `"ACFS"`, u32 version, u64 iteration, u32 count, then per tensor
//! u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data.
//!
//! A model checkpoint holds `meta/*` architecture scalars, every parameter,
//! batch-norm statistics as `<bn>.running_mean` / `<bn>.running_var`, and
//! momentum buffers as `optim/<param>`.

use super::optim::OptimState;
use crate::acf::AcfVariant;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ACFS";
pub const VERSION: u32 = 1;

pub fn encode(iteration: u64, tensors: &IndexMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {}: need {n} more bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(u64, IndexMap<String, Tensor>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let iteration = u64::from_le_bytes(r.array()?);
    let count = u32::from_le_bytes(r.array()?);
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((iteration, tensors))
}

/// Model state plus training progress.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: Model,
    pub optim_buffers: IndexMap<String, Tensor>,
}

fn meta_scalar(v: usize) -> Tensor {
    Tensor::scalar(v as f32)
}

fn config_tensors(c: &NetworkConfig) -> IndexMap<String, Tensor> {
    let mut m = IndexMap::new();
    m.insert("meta/num_classes".into(), meta_scalar(c.num_classes));
    m.insert("meta/base_channels".into(), meta_scalar(c.base_channels));
    m.insert("meta/reduced_channels".into(), meta_scalar(c.reduced_channels));
    m.insert("meta/head_channels".into(), meta_scalar(c.head_channels));
    m.insert("meta/use_aspp".into(), meta_scalar(c.use_aspp as usize));
    m.insert("meta/aspp_channels".into(), meta_scalar(c.aspp_channels));
    let d: Vec<f32> = c.aspp_dilations.iter().map(|&d| d as f32).collect();
    m.insert("meta/aspp_dilations".into(), Tensor::new(&[d.len()], d).expect("rank 1"));
    m.insert("meta/variant".into(), meta_scalar(c.variant.code() as usize));
    m.insert("meta/output_stride".into(), meta_scalar(c.output_stride));
    m
}

fn config_from(t: &IndexMap<String, Tensor>) -> Result<NetworkConfig> {
    let get = |k: &str| -> Result<usize> {
        let v = t
            .get(&format!("meta/{k}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing meta/{k}")))?;
        match v.data() {
            [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            _ => Err(Error::Checkpoint(format!("meta/{k} is not a non-negative integer"))),
        }
    };
    let dil = t
        .get("meta/aspp_dilations")
        .ok_or_else(|| Error::Checkpoint("missing meta/aspp_dilations".into()))?;
    let config = NetworkConfig {
        num_classes: get("num_classes")?,
        base_channels: get("base_channels")?,
        reduced_channels: get("reduced_channels")?,
        head_channels: get("head_channels")?,
        use_aspp: get("use_aspp")? != 0,
        aspp_channels: get("aspp_channels")?,
        aspp_dilations: dil.data().iter().map(|&d| d as usize).collect(),
        variant: AcfVariant::from_code(get("variant")? as u32)?,
        output_stride: get("output_stride")?,
    };
    config.validate()?;
    Ok(config)
}

/// All tensors describing `model` (no optimizer state).
pub fn model_tensors(model: &Model) -> IndexMap<String, Tensor> {
    let mut m = config_tensors(model.config());
    for (name, p) in model.params.params() {
        m.insert(name.to_string(), p.value.clone());
    }
    for (name, s) in model.params.all_stats() {
        m.insert(format!("{name}.running_mean"), s.mean.clone());
        m.insert(format!("{name}.running_var"), s.var.clone());
    }
    m
}

pub fn save(path: &Path, iteration: u64, model: &Model, optim: Option<&OptimState>) -> Result<()> {
    let mut tensors = model_tensors(model);
    if let Some(o) = optim {
        for (name, b) in &o.buffers {
            tensors.insert(format!("optim/{name}"), b.clone());
        }
    }
    let bytes = encode(iteration, &tensors)?;
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_tensors(decode(&bytes)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn from_tensors((iteration, mut t): (u64, IndexMap<String, Tensor>)) -> Result<Checkpoint> {
    let config = config_from(&t)?;
    // Initial values are overwritten below; the seed is irrelevant.
    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let v = t
            .shift_remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if v.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, expected {shape:?}",
                v.shape()
            )));
        }
        Ok(v)
    };
    for (name, p) in model.params.params_mut() {
        p.value = take(name, p.value.shape())?;
    }
    let stat_names: Vec<String> = model.params.all_stats().map(|(n, _)| n.to_string()).collect();
    for name in stat_names {
        let s = model.params.stats_mut(&name).expect("listed");
        s.mean = take(&format!("{name}.running_mean"), &[s.mean.numel()])?;
        s.var = take(&format!("{name}.running_var"), &[s.var.numel()])?;
    }
    let mut optim_buffers = IndexMap::new();
    for (name, v) in t {
        if let Some(p) = name.strip_prefix("optim/") {
            optim_buffers.insert(p.to_string(), v);
        } else if !name.starts_with("meta/") {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    Ok(Checkpoint {
        iteration,
        model,
        optim_buffers,
    })
}

impl Model {
    pub fn from_checkpoint(path: &Path) -> Result<Model> {
        Ok(load(path)?.model)
    }
}
