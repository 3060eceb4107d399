//! Random flip, random scale, random crop.

use crate::data::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::{flip_horizontal, resize_bilinear, Tensor};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale_min: f32,
    pub scale_max: f32,
    /// Square crop size.
    pub crop: usize,
    pub ignore_id: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            scale_min: 0.5,
            scale_max: 2.0,
            crop: 64,
            ignore_id: 255,
        }
    }
}

/// One concrete draw of the random choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f32,
    /// Fractional crop offsets in `[0, 1)`, applied to the slack.
    pub crop_y: f32,
    pub crop_x: f32,
}

impl AugmentParams {
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip && rng.random_bool(0.5);
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        AugmentParams {
            flip,
            scale,
            crop_y: rng.random(),
            crop_x: rng.random(),
        }
    }
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    apply(sample, cfg, &AugmentParams::draw(cfg, rng))
}

pub fn flip_sample(s: &Sample) -> Sample {
    Sample {
        image: flip_horizontal(&s.image),
        label: s.label.flipped(),
    }
}

/// Nearest-neighbour label resize using the same align-corners grid as the
/// bilinear image resize, so no new label values can appear.
pub fn resize_labels_nearest(l: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let pick = |o: usize, inn: usize, out: usize| -> usize {
        if out <= 1 || inn <= 1 {
            0
        } else {
            ((o as f64 * (inn - 1) as f64 / (out - 1) as f64).round() as usize).min(inn - 1)
        }
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, l.height, out_h);
        for x in 0..out_w {
            data.push(l.data[sy * l.width + pick(x, l.width, out_w)]);
        }
    }
    LabelMap {
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn apply(sample: &Sample, cfg: &AugmentConfig, p: &AugmentParams) -> Result<Sample> {
    if !(p.scale > 0.0) || cfg.crop == 0 {
        return Err(Error::invalid("augmentation needs a positive scale and crop size"));
    }
    let mut s = if p.flip { flip_sample(sample) } else { sample.clone() };
    let (h, w) = (s.label.height, s.label.width);
    let nh = ((h as f32 * p.scale).round() as usize).max(1);
    let nw = ((w as f32 * p.scale).round() as usize).max(1);
    if (nh, nw) != (h, w) {
        s.image = resize_bilinear(&s.image, nh, nw)?;
        s.label = resize_labels_nearest(&s.label, nh, nw);
    }
    Ok(crop(&s, cfg.crop, p.crop_y, p.crop_x, cfg.ignore_id))
}

/// Crop a `size×size` window, padding with the image's mean colour and the
/// ignore id where the sample is smaller than the window.
fn crop(s: &Sample, size: usize, fy: f32, fx: f32, ignore: u8) -> Sample {
    let (h, w) = (s.label.height, s.label.width);
    let oy = ((h.saturating_sub(size)) as f32 * fy).floor() as usize;
    let ox = ((w.saturating_sub(size)) as f32 * fx).floor() as usize;
    if (h, w) == (size, size) {
        return s.clone();
    }
    let plane = h * w;
    let img = s.image.data();
    let mean: Vec<f32> = (0..3)
        .map(|c| img[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
        .collect();
    let mut out = vec![0.0f32; 3 * size * size];
    let mut lab = vec![ignore; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sy, sx) = (oy + y, ox + x);
            let inside = sy < h && sx < w;
            for c in 0..3 {
                out[(c * size + y) * size + x] = if inside { img[c * plane + sy * w + sx] } else { mean[c] };
            }
            if inside {
                lab[y * size + x] = s.label.data[sy * w + sx];
            }
        }
    }
    Sample {
        image: Tensor::new(&[3, size, size], out).expect("shape"),
        label: LabelMap {
            height: size,
            width: size,
            data: lab,
        },
    }
}
