//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// An 8-bit raster, interleaved when `channels == 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, data)
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, data)
    }

    fn checked(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} raster needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            data,
        })
    }

    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.channels != 3 {
            return Err(Error::invalid("expected an RGB image"));
        }
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], out)
    }

    /// Inverse of [`Pnm::to_tensor`], clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::shape("Pnm::from_tensor", format!("expected 3×H×W, got {:?}", t.shape())));
        };
        let plane = h * w;
        let d = t.data();
        let data = (0..plane)
            .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        Self::rgb(w, h, data)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments that run to end of line.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval must be 255, got {maxval}"),
        });
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected a single whitespace byte after the header"));
    }
    c.pos += 1;
    let expected = width * height * channels;
    let actual = bytes.len() - c.pos;
    if actual < expected {
        return Err(c.err(format!("truncated payload: expected {expected} bytes, found {actual}")));
    }
    Pnm::checked(width, height, channels, bytes[c.pos..c.pos + expected].to_vec())
}

pub fn encode(p: &Pnm) -> Vec<u8> {
    let magic = if p.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", p.width, p.height).into_bytes();
    out.extend_from_slice(&p.data);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<Pnm> {
    let p = read(path)?;
    if p.channels != 3 {
        return Err(Error::Dataset(format!("{}: expected a P6 image", path.display())));
    }
    Ok(p)
}

pub fn read_pgm(path: &Path) -> Result<Pnm> {
    let p = read(path)?;
    if p.channels != 1 {
        return Err(Error::Dataset(format!("{}: expected a P5 image", path.display())));
    }
    Ok(p)
}

pub fn write(path: &Path, p: &Pnm) -> Result<()> {
    std::fs::write(path, encode(p)).map_err(|e| Error::file(path, e))
}
