//! Dense row-major `f32` tensors and the raw kernels shared by the graph ops
//! and the non-differentiable pipeline code (augmentation, inference).

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(b, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// One `(b, :, :, :)` slab of a rank-4 tensor as an owned `1×C×H×W` tensor.
    pub fn batch_item(&self, b: usize) -> Result<Tensor> {
        let (nb, c, h, w) = self.dims4()?;
        if b >= nb {
            return Err(Error::invalid(format!("batch index {b} out of {nb}")));
        }
        let plane = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[b * plane..(b + 1) * plane].to_vec())
    }

    /// Stack `1×C×H×W` (or `C×H×W`) tensors into a batch.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let inner: Vec<usize> = match first.rank() {
            4 if first.shape[0] == 1 => first.shape[1..].to_vec(),
            3 => first.shape.clone(),
            _ => return Err(Error::shape("stack", format!("{:?}", first.shape))),
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.numel() != first.numel() {
                return Err(Error::shape("stack", "items differ in size"));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` with row-major operands; `op` transposes
/// when the matching flag is set. `a` is logically `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    alpha: f32,
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides above describe in-bounds views of slices whose lengths
    // were asserted to cover m×k, k×n and m×n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source coordinate and interpolation weights for one output index under
/// align-corners sampling.
#[inline]
/// Source taps `(i0, i1, weight of i1)` of output index `out_idx`.
/// Align-corners maps the end samples onto each other; otherwise pixel
/// centres are matched (`src = (o + ½)·in/out − ½`, clamped at the borders).
pub(crate) fn sample_coord(out_idx: usize, in_len: usize, out_len: usize, align_corners: bool) -> (usize, usize, f32) {
    if in_len <= 1 {
        return (0, 0, 0.0);
    }
    let src = if align_corners {
        if out_len <= 1 {
            return (0, 0, 0.0);
        }
        out_idx as f32 * (in_len - 1) as f32 / (out_len - 1) as f32
    } else {
        ((out_idx as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5).max(0.0)
    };
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let wgt = if i0 == i1 { 0.0 } else { src - i0 as f32 };
    (i0, i1, wgt)
}

/// Bilinear resize of every `H×W` plane of `planes` (laid out contiguously).
#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_planes_bilinear(
    src: &[f32],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Vec<f32> {
    let mut out = vec![0.0f32; planes * out_h * out_w];
    let ys: Vec<_> = (0..out_h).map(|y| sample_coord(y, in_h, out_h, align_corners)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| sample_coord(x, in_w, out_w, align_corners)).collect();
    for p in 0..planes {
        let s = &src[p * in_h * in_w..(p + 1) * in_h * in_w];
        let o = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let top = s[y0 * in_w + x0] * (1.0 - wx) + s[y0 * in_w + x1] * wx;
                let bot = s[y1 * in_w + x0] * (1.0 - wx) + s[y1 * in_w + x1] * wx;
                o[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Bilinear (align-corners) resize of the two trailing axes of a rank-3 or
/// rank-4 tensor. Returns a clone when the size is unchanged.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::invalid("resize needs at least two axes"));
    }
    let (in_h, in_w) = (t.shape[r - 2], t.shape[r - 1]);
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
        return Err(Error::invalid("resize to or from an empty size"));
    }
    let planes = t.numel() / (in_h * in_w);
    let data = resize_planes_bilinear(&t.data, planes, in_h, in_w, out_h, out_w, true);
    let mut shape = t.shape.clone();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(&shape, data)
}

/// Mirror the last axis.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape.last().unwrap_or(&1);
    let mut out = t.clone();
    if w > 1 {
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Numerically stable softmax along `axis`, without a graph.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(t.shape(), axis)?;
    let mut out = t.clone();
    softmax_in_place(&mut out.data, outer, len, inner);
    Ok(out)
}

pub(crate) fn softmax_in_place(data: &mut [f32], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |k: usize| base + k * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for k in 0..len {
                mx = mx.max(data[idx(k)]);
            }
            let mut sum = 0.0f32;
            for k in 0..len {
                let e = (data[idx(k)] - mx).exp();
                data[idx(k)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for k in 0..len {
                data[idx(k)] *= inv;
            }
        }
    }
}

/// Split a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Index of the largest value along axis 1 of a `B×N×H×W` tensor, per pixel.
pub fn argmax_channels(t: &Tensor) -> Result<Vec<usize>> {
    let (b, n, h, w) = t.dims4()?;
    let hw = h * w;
    let mut out = vec![0usize; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..n {
                let v = t.data[(bi * n + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[bi * hw + p] = best;
        }
    }
    Ok(out)
}
