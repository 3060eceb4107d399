//! Samples, label maps, dataset manifests, and the synthetic generator.

pub mod netpbm;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use netpbm::Pnm;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const IGNORE_ID: u8 = 255;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Row-major `H×W` class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn flipped(&self) -> LabelMap {
        let mut out = self.clone();
        if self.width > 1 {
            for row in out.data.chunks_mut(self.width) {
                row.reverse();
            }
        }
        out
    }
}

/// One image (`3×H×W`, values in `[0, 1]`) with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, label: LabelMap) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if (h, w) == (label.height, label.width) => Ok(Sample { image, label }),
            s => Err(Error::Dataset(format!(
                "image {s:?} does not match label map {}x{}",
                label.height, label.width
            ))),
        }
    }

    pub fn load(image: &Path, label: &Path) -> Result<Self> {
        let img = netpbm::read_ppm(image)?;
        let lab = netpbm::read_pgm(label)?;
        if (img.width, img.height) != (lab.width, lab.height) {
            return Err(Error::Dataset(format!(
                "{} is {}x{} but {} is {}x{}",
                image.display(),
                img.width,
                img.height,
                label.display(),
                lab.width,
                lab.height
            )));
        }
        Sample::new(img.to_tensor()?, LabelMap::new(lab.height, lab.width, lab.data)?)
    }
}

/// Stack samples of equal size into a `B×3×H×W` batch and flat labels.
pub fn collate(samples: &[Sample]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = Tensor::stack(&images)?;
    let labels = samples.iter().flat_map(|s| s.label.data.iter().copied()).collect();
    Ok((batch, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Image/label pairs relative to `root`, plus class names.
///
/// On disk (`manifest.txt`): a `classes <name> ...` line followed by one
/// `<split> <image.ppm> <label.pgm>` line per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<(PathBuf, PathBuf)>,
    pub val: Vec<(PathBuf, PathBuf)>,
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| if i == 0 { "background".to_string() } else { format!("class{i}") })
        .collect()
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pairs(&self, split: Split) -> &[(PathBuf, PathBuf)] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("classes {}\n", self.class_names.join(" "));
        for (split, pairs) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            for (i, l) in pairs {
                let _ = writeln!(s, "{} {} {}", split.name(), i.display(), l.display());
            }
        }
        s
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(|e| Error::file(path, e))
    }

    /// Parse `root/manifest.txt`; does not touch the referenced files.
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let bad = |line: usize, msg: String| Error::Config {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut m = DatasetManifest {
            root: root.to_path_buf(),
            class_names: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let mut words = line.split_whitespace();
            match words.next() {
                None => {}
                Some(w) if w.starts_with('#') => {}
                Some("classes") => m.class_names = words.map(str::to_string).collect(),
                Some(split @ ("train" | "val")) => {
                    let (Some(img), Some(lab), None) = (words.next(), words.next(), words.next()) else {
                        return Err(bad(i + 1, "expected `<split> <image> <label>`".into()));
                    };
                    let pair = (PathBuf::from(img), PathBuf::from(lab));
                    if split == "train" { m.train.push(pair) } else { m.val.push(pair) }
                }
                Some(w) => return Err(bad(i + 1, format!("unknown entry `{w}`"))),
            }
        }
        if m.class_names.len() < 2 {
            return Err(bad(1, "need a `classes` line with at least two names".into()));
        }
        Ok(m)
    }

    /// Load every sample of a split, checking sizes and label ranges.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        let n = self.num_classes();
        self.pairs(split)
            .iter()
            .map(|(i, l)| {
                let s = Sample::load(&self.root.join(i), &self.root.join(l))?;
                if let Some(&v) = s.label.data.iter().find(|&&v| v != IGNORE_ID && v as usize >= n) {
                    return Err(Error::Dataset(format!("{}: label {v} outside [0, {n})", l.display())));
                }
                Ok(s)
            })
            .collect()
    }

    /// Check every referenced pair exists and agrees in size.
    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Val] {
            self.load(split)?;
        }
        Ok(())
    }
}

/// Write a label map (or any byte raster) as P5.
pub fn write_label_pgm(path: &Path, l: &LabelMap) -> Result<()> {
    netpbm::write(path, &Pnm::gray(l.width, l.height, l.data.clone())?)
}
