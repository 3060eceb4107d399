//! Toy segmentation scenes: rectangles, disks and triangles on a striped
//! background. Each class has a base colour and a texture; every image gets
//! its own colour cast, so absolute colour is only a weak cue on its own.

use super::netpbm::{self, Pnm};
use super::{default_class_names, write_label_pgm, DatasetManifest, LabelMap, Sample, Split};
use crate::config::KvFile;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub noise_sigma: f32,
    /// Half-width of the per-image gain and offset ranges.
    pub color_jitter: f32,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_train: 200,
            num_val: 50,
            image_size: 96,
            num_classes: 4,
            noise_sigma: 0.06,
            color_jitter: 0.15,
            max_shapes: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::invalid("num_classes must be in [2, 255]"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be >= 8"));
        }
        if self.max_shapes == 0 {
            return Err(Error::invalid("max_shapes must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.color_jitter >= 0.0 && self.color_jitter < 1.0) {
            return Err(Error::invalid("noise_sigma must be >= 0 and color_jitter in [0, 1)"));
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(text, source)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    fn from_kv(mut kv: KvFile) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        kv.take("num_train", &mut s.num_train)?;
        kv.take("num_val", &mut s.num_val)?;
        kv.take("image_size", &mut s.image_size)?;
        kv.take("num_classes", &mut s.num_classes)?;
        kv.take("noise_sigma", &mut s.noise_sigma)?;
        kv.take("color_jitter", &mut s.color_jitter)?;
        kv.take("max_shapes", &mut s.max_shapes)?;
        kv.take("seed", &mut s.seed)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Disk { cy: f32, cx: f32, r: f32 },
    Triangle { p: [(f32, f32); 3] },
}

impl Shape {
    fn random(size: f32, rng: &mut impl Rng) -> Self {
        let extent = rng.random_range(0.35..0.65) * size;
        let cy = rng.random_range(extent / 2.0..size - extent / 2.0);
        let cx = rng.random_range(extent / 2.0..size - extent / 2.0);
        match rng.random_range(0..3) {
            0 => {
                let aspect: f32 = rng.random_range(0.6..1.0);
                let (hh, hw) = if rng.random_bool(0.5) {
                    (extent / 2.0, extent * aspect / 2.0)
                } else {
                    (extent * aspect / 2.0, extent / 2.0)
                };
                Shape::Rect { y0: cy - hh, x0: cx - hw, y1: cy + hh, x1: cx + hw }
            }
            1 => Shape::Disk { cy, cx, r: extent / 2.0 },
            _ => {
                let r = extent / 2.0;
                let rot: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let p = std::array::from_fn(|k| {
                    let a = rot + k as f32 * std::f32::consts::TAU / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                });
                Shape::Triangle { p }
            }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { p } => {
                let side = |a: (f32, f32), b: (f32, f32)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Base colour of a class: background is grey, foreground classes are spread
/// around a hue circle at moderate saturation.
fn class_color(class: usize, n: usize) -> [f32; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let hue = (class - 1) as f32 / (n - 1) as f32;
    let (s, v) = (0.45, 0.65);
    let c = v * s;
    let h6 = hue * 6.0;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Zero-mean texture in `[-1, 1]`, one pattern per class.
fn texture(class: usize, y: usize, x: usize) -> f32 {
    let on = match class % 4 {
        0 => (x / 4) % 2 == 0,
        1 => (y / 2) % 2 == 0,
        2 => ((y / 3) + (x / 3)) % 2 == 0,
        _ => ((x + y) / 3) % 2 == 0,
    };
    if on { 1.0 } else { -1.0 }
}

const TEXTURE_AMPLITUDE: f32 = 0.15;

/// One scene. Deterministic in `rng`.
pub fn generate_sample(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Sample> {
    let (size, n) = (spec.image_size, spec.num_classes);
    let mut labels = vec![0u8; size * size];
    let count = rng.random_range(spec.max_shapes.div_ceil(2)..=spec.max_shapes);
    for _ in 0..count {
        let class = rng.random_range(1..n) as u8;
        let shape = Shape::random(size as f32, rng);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    labels[y * size + x] = class;
                }
            }
        }
    }
    // A degenerate shape can miss every pixel centre; guarantee a foreground.
    if labels.iter().all(|&l| l == 0) {
        let c = size / 2;
        let class = rng.random_range(1..n) as u8;
        for y in c - 2..c + 2 {
            for x in c - 2..c + 2 {
                labels[y * size + x] = class;
            }
        }
    }
    let j = spec.color_jitter;
    let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(1.0 - j..=1.0 + j));
    let offset: [f32; 3] = std::array::from_fn(|_| rng.random_range(-j..=j) * 0.5);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE)).expect("sigma >= 0");
    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let class = labels[y * size + x] as usize;
            let base = class_color(class, n);
            let t = TEXTURE_AMPLITUDE * texture(class, y, x);
            for c in 0..3 {
                let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = (base[c] + t) * gain[c] + offset[c] + eps;
                // Quantize now so the in-memory sample equals what a PPM stores.
                img[c * plane + y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Sample::new(
        crate::tensor::Tensor::new(&[3, size, size], img)?,
        LabelMap::new(size, size, labels)?,
    )
}

/// Per-sample RNG: the seed picks the key and the global index picks the
/// stream, so samples do not depend on each other.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate both splits in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let make = |offset: usize, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| generate_sample(spec, &mut sample_rng(spec.seed, (offset + i) as u64)))
            .collect()
    };
    Ok((make(0, spec.num_train)?, make(spec.num_train, spec.num_val)?))
}

/// Write PPM images, PGM labels and the manifest under `out`.
pub fn write_dataset(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    let (train, val) = generate(spec)?;
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::file(d, e))?;
    }
    let mut manifest = DatasetManifest {
        root: out.to_path_buf(),
        class_names: default_class_names(spec.num_classes),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (split, samples) in [(Split::Train, &train), (Split::Val, &val)] {
        for (i, s) in samples.iter().enumerate() {
            let img = PathBuf::from(format!("images/{}_{i:04}.ppm", split.name()));
            let lab = PathBuf::from(format!("labels/{}_{i:04}.pgm", split.name()));
            netpbm::write(&out.join(&img), &Pnm::from_tensor(&s.image)?)?;
            write_label_pgm(&out.join(&lab), &s.label)?;
            match split {
                Split::Train => manifest.train.push((img, lab)),
                Split::Val => manifest.val.push((img, lab)),
            }
        }
    }
    manifest.write()?;
    Ok(manifest)
}
