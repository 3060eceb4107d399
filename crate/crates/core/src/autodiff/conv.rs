use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_len(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let l = g.col_len();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let l = g.col_len();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `input: B×Cin×H×W`, `weight: Cout×Cin×k×k`, `bias: Cout`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if kh != kw {
            return Err(Error::invalid("conv2d: only square kernels are supported"));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d: stride and dilation must be >= 1"));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.shape(bv))));
            }
        }
        let k = kh;
        let span = dilation * (k - 1) + 1;
        if h + 2 * padding < span || w + 2 * padding < span {
            return Err(Error::invalid(format!(
                "conv2d: {h}x{w} input with padding {padding} is smaller than the \
                 effective kernel size {span} (kernel {k}, dilation {dilation})"
            )));
        }
        let geo = Geometry {
            cin,
            h,
            w,
            k,
            stride,
            pad: padding,
            dil: dilation,
            oh: (h + 2 * padding - span) / stride + 1,
            ow: (w + 2 * padding - span) / stride + 1,
        };
        let (kk, l) = (geo.col_rows(), geo.col_len());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0f32; b * cout * l];
        let keep_cols = self.grad_enabled() && self.requires_grad(weight) && !geo.is_pointwise();
        let mut saved = if keep_cols { vec![0.0f32; b * kk * l] } else { Vec::new() };
        let mut scratch = if geo.is_pointwise() { Vec::new() } else { vec![0.0f32; kk * l] };
        for bi in 0..b {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            let cols: &[f32] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, &mut scratch);
                if keep_cols {
                    saved[bi * kk * l..(bi + 1) * kk * l].copy_from_slice(&scratch);
                }
                &scratch
            };
            let ob = &mut out[bi * cout * l..(bi + 1) * cout * l];
            gemm(cout, kk, l, wt, false, cols, false, ob, 1.0, 0.0);
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for (c, &bias_c) in bd.iter().enumerate() {
                    let start = (bi * cout + c) * l;
                    out[start..start + l].iter_mut().for_each(|v| *v += bias_c);
                }
            }
        }
        let v = Tensor::new(&[b, cout, geo.oh, geo.ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.custom("conv2d", &inputs, v, move |args| {
            let g = args.grad.data();
            let (x, wt) = (args.inputs[0].data(), args.inputs[1].data());
            let dx = args.needs[0].then(|| {
                let mut dx = vec![0.0f32; b * cin * h * w];
                let mut dcols = vec![0.0f32; kk * l];
                for bi in 0..b {
                    let gb = &g[bi * cout * l..(bi + 1) * cout * l];
                    let dxb = &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w];
                    if geo.is_pointwise() {
                        gemm(kk, cout, l, wt, true, gb, false, dxb, 1.0, 0.0);
                    } else {
                        gemm(kk, cout, l, wt, true, gb, false, &mut dcols, 1.0, 0.0);
                        col2im(&dcols, &geo, dxb);
                    }
                }
                Tensor::new(args.inputs[0].shape(), dx).expect("shape")
            });
            let dw = args.needs[1].then(|| {
                let mut dw = vec![0.0f32; cout * kk];
                let mut scratch = Vec::new();
                for bi in 0..b {
                    let gb = &g[bi * cout * l..(bi + 1) * cout * l];
                    let cols: &[f32] = if geo.is_pointwise() {
                        &x[bi * cin * h * w..(bi + 1) * cin * h * w]
                    } else if !saved.is_empty() {
                        &saved[bi * kk * l..(bi + 1) * kk * l]
                    } else {
                        scratch.resize(kk * l, 0.0);
                        im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &geo, &mut scratch);
                        &scratch
                    };
                    gemm(cout, l, kk, gb, false, cols, true, &mut dw, 1.0, 1.0);
                }
                Tensor::new(args.inputs[1].shape(), dw).expect("shape")
            });
            let mut grads = vec![dx, dw];
            if args.inputs.len() == 3 {
                let db = args.needs[2].then(|| {
                    let mut db = vec![0.0f32; cout];
                    for bi in 0..b {
                        for (c, d) in db.iter_mut().enumerate() {
                            let start = (bi * cout + c) * l;
                            *d += g[start..start + l].iter().sum::<f32>();
                        }
                    }
                    Tensor::new(&[cout], db).expect("shape")
                });
                grads.push(db);
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_overlap_counts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        let d = g.value(y).data();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn pointwise_scale() {
        let mut g = Graph::new();
        let xs = Tensor::from_fn(&[2, 1, 3, 2], |i| i as f32 * 0.5 - 1.0);
        let x = g.constant(xs.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(xs.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn output_size_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 9, 7]));
        let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 2, 2).unwrap();
        // floor((9 + 4 - 4 - 1)/2) + 1 = 5, floor((7 + 4 - 5)/2) + 1 = 4
        assert_eq!(g.shape(y), &[1, 3, 5, 4]);
    }

    #[test]
    fn rejects_channel_mismatch_and_tiny_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1, 1), Err(Error::InvalidArgument(_))));
        let w2 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, w2, None, 1, 0, 4).is_err());
        assert!(g.conv2d(x, w2, None, 0, 1, 1).is_err());
    }
}
