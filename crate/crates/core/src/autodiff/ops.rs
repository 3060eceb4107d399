use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{sample_coord, axis_split, gemm, resize_planes_bilinear, softmax_in_place, Tensor};

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl Graph {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.custom("add", &[a, b], v, |args| {
            vec![Some(args.grad.clone()), Some(args.grad.clone())]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.custom("mul", &[a, b], v, |args| {
            let (x, y) = (args.inputs[0], args.inputs[1]);
            vec![
                args.needs[0].then(|| zip(args.grad, y, |g, y| g * y)),
                args.needs[1].then(|| zip(args.grad, x, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = map(self.value(a), |x| x * s);
        self.custom("scale", &[a], v, move |args| vec![Some(map(args.grad, |g| g * s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = map(self.value(a), |x| x + s);
        self.custom("add_scalar", &[a], v, |args| vec![Some(args.grad.clone())])
    }

    /// Elementwise `1/x`.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), |x| 1.0 / x);
        self.custom("recip", &[a], v, |args| {
            vec![Some(zip(args.grad, args.output, |g, y| -g * y * y))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), |x| x.max(0.0));
        self.custom("relu", &[a], v, |args| {
            vec![Some(zip(args.grad, args.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        self.custom("sum", &[a], Tensor::scalar(s), |args| {
            vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let x = self.value(a).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, out)?;
        self.custom("sum_axis", &[a], v, move |args| {
            let g = args.grad.data();
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, dx).expect("shape"))]
        })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let mut v = self.value(a).clone();
        softmax_in_place(v.data_mut(), outer, len, inner);
        self.custom("softmax", &[a], v, move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut dx = vec![0.0f32; y.len()];
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut dot = 0.0f32;
                    for k in 0..len {
                        let j = base + k * inner + i;
                        dot += g[j] * y[j];
                    }
                    for k in 0..len {
                        let j = base + k * inner + i;
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(args.output.shape(), dx).expect("shape"))]
        })
    }

    /// `M×K · K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let (m, n) = (sa[0], sb[1]);
        let c = self.bmm(a3, b3)?;
        self.reshape(c, &[m, n])
    }

    /// Batched `B×M×K · B×K×N`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0f32; bs * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &x[i * m * k..],
                    false,
                    &y[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    1.0,
                    0.0,
                );
            }
        }
        let v = Tensor::new(&[bs, m, n], out)?;
        self.custom("bmm", &[a, b], v, move |args| {
            let (x, y, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let da = args.needs[0].then(|| {
                let mut da = vec![0.0f32; bs * m * k];
                for i in 0..bs {
                    gemm(m, n, k, &g[i * m * n..], false, &y[i * k * n..], true, &mut da[i * m * k..], 1.0, 0.0);
                }
                Tensor::new(&[bs, m, k], da).expect("shape")
            });
            let db = args.needs[1].then(|| {
                let mut db = vec![0.0f32; bs * k * n];
                for i in 0..bs {
                    gemm(k, m, n, &x[i * m * k..], true, &g[i * m * n..], false, &mut db[i * k * n..], 1.0, 0.0);
                }
                Tensor::new(&[bs, k, n], db).expect("shape")
            });
            vec![da, db]
        })
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "{perm:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let v = Tensor::new(&out_shape, data)?;
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.custom("transpose", &[a], v, move |args| {
            let (s, d) = permute_data(args.grad.data(), args.grad.shape(), &inverse);
            vec![Some(Tensor::new(&s, d).expect("shape"))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let in_shape = self.shape(a).to_vec();
        self.custom("reshape", &[a], v, move |args| {
            vec![Some(args.grad.clone().reshape(&in_shape).expect("shape"))]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        axis_split(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.custom("concat", parts, v, move |args| {
            let g = args.grad.data();
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (i, &len) in lens.iter().enumerate() {
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&g[start..start + len * inner]);
                }
                offset += len;
                grads.push(Some(Tensor::new(args.inputs[i].shape(), d).expect("shape")));
            }
            grads
        })
    }

    /// Bilinear resize of a `B×C×H×W` tensor.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("upsample to or from an empty size"));
        }
        let data = resize_planes_bilinear(self.value(a).data(), b * c, h, w, out_h, out_w, align_corners);
        let v = Tensor::new(&[b, c, out_h, out_w], data)?;
        self.custom("upsample_bilinear", &[a], v, move |args| {
            let g = args.grad.data();
            let mut dx = vec![0.0f32; b * c * h * w];
            let ys: Vec<_> = (0..out_h).map(|y| sample_coord(y, h, out_h, align_corners)).collect();
            let xs: Vec<_> = (0..out_w).map(|x| sample_coord(x, w, out_w, align_corners)).collect();
            for p in 0..b * c {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        dp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        dp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                        dp[y1 * w + x0] += gv * wy * (1.0 - wx);
                        dp[y1 * w + x1] += gv * wy * wx;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        })
    }

    /// Extend the bottom and right edges by repeating the last row and column.
    pub fn pad_edge(&mut self, a: Var, bottom: usize, right: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::invalid("pad_edge of an empty map"));
        }
        let (oh, ow) = (h + bottom, w + right);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
                out.extend_from_slice(row);
                out.extend(std::iter::repeat_n(row[w - 1], right));
            }
        }
        let v = Tensor::new(&[b, c, oh, ow], out)?;
        self.custom("pad_edge", &[a], v, move |args| {
            let g = args.grad.data();
            let mut dx = vec![0.0f32; b * c * h * w];
            for p in 0..b * c {
                for y in 0..oh {
                    for x in 0..ow {
                        dx[p * h * w + y.min(h - 1) * w + x.min(w - 1)] += g[(p * oh + y) * ow + x];
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        })
    }

    /// Average pooling with a square window and no padding.
    pub fn avg_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::invalid(format!(
                "avg_pool2d kernel {kernel} stride {stride} on {h}x{w}"
            )));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let x = self.value(a).data();
        let inv = 1.0 / (kernel * kernel) as f32;
        let mut out = vec![0.0f32; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s += x[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * inv;
                }
            }
        }
        let v = Tensor::new(&[b, c, oh, ow], out)?;
        self.custom("avg_pool2d", &[a], v, move |args| {
            let g = args.grad.data();
            let mut dx = vec![0.0f32; b * c * h * w];
            for p in 0..b * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(p * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                dx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        })
    }

    /// `B×C×H×W -> B×C×1×1`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let x = self.value(a).data();
        let out: Vec<f32> = x.chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        let v = Tensor::new(&[b, c, 1, 1], out)?;
        self.custom("global_avg_pool", &[a], v, move |args| {
            let mut dx = Vec::with_capacity(b * c * hw);
            for &gv in args.grad.data() {
                dx.extend(std::iter::repeat_n(gv / hw as f32, hw));
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        })
    }

    /// Multiply each row of the trailing `R×C` matrix by a per-row factor:
    /// `x: [.., R, C]`, `s: [.., R]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() < 2 || sx[..sx.len() - 1] != ss[..] {
            return Err(Error::shape("scale_rows", format!("{sx:?} by {ss:?}")));
        }
        let cols = sx[sx.len() - 1];
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let out: Vec<f32> = xd
            .chunks(cols.max(1))
            .zip(sd)
            .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
            .collect();
        let v = Tensor::new(&sx, out)?;
        self.custom("scale_rows", &[x, s], v, move |args| {
            let (xd, sd, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let dx = args.needs[0].then(|| {
                let d: Vec<f32> = g
                    .chunks(cols.max(1))
                    .zip(sd)
                    .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
                    .collect();
                Tensor::new(args.inputs[0].shape(), d).expect("shape")
            });
            let ds = args.needs[1].then(|| {
                let d: Vec<f32> = g
                    .chunks(cols.max(1))
                    .zip(xd.chunks(cols.max(1)))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(args.inputs[1].shape(), d).expect("shape")
            });
            vec![dx, ds]
        })
    }

    /// Weighted softmax cross entropy over axis 1 of `B×N×H×W` logits.
    ///
    /// Pixel `p` contributes `weights[p]·(−log softmax(logits)[targets[p]])`;
    /// the total is divided by `normalizer`. Pixels with zero weight are
    /// skipped, so their target may be anything. A zero normalizer yields a
    /// zero loss with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
        normalizer: f32,
    ) -> Result<Var> {
        let (b, n, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw || weights.len() != b * hw {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} pixels, {} targets, {} weights", b * hw, targets.len(), weights.len()),
            ));
        }
        if let Some(t) = targets.iter().zip(weights).find(|(t, w)| **w != 0.0 && **t >= n) {
            return Err(Error::invalid(format!("target {} out of {n} classes", t.0)));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0f32; b * n * hw];
        let mut total = 0.0f64;
        for bi in 0..b {
            for p in 0..hw {
                let at = |c: usize| (bi * n + c) * hw + p;
                let mx = (0..n).map(|c| x[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = (0..n).map(|c| (x[at(c)] - mx).exp()).sum();
                for c in 0..n {
                    probs[at(c)] = (x[at(c)] - mx).exp() / sum;
                }
                let wgt = weights[bi * hw + p];
                if wgt != 0.0 {
                    let t = targets[bi * hw + p];
                    let nll = sum.ln() + mx - x[at(t)];
                    total += (wgt * nll) as f64;
                }
            }
        }
        let loss = if normalizer > 0.0 { (total / normalizer as f64) as f32 } else { 0.0 };
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.custom("softmax_cross_entropy", &[logits], Tensor::scalar(loss), move |args| {
            let mut dx = vec![0.0f32; b * n * hw];
            if normalizer > 0.0 {
                let g = args.grad.item() / normalizer;
                for bi in 0..b {
                    for p in 0..hw {
                        let wgt = weights[bi * hw + p];
                        if wgt == 0.0 {
                            continue;
                        }
                        let t = targets[bi * hw + p];
                        for c in 0..n {
                            let j = (bi * n + c) * hw + p;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dx[j] = g * wgt * (probs[j] - onehot);
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[b, n, h, w], dx).expect("shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let a = g.constant(Tensor::from_fn(&[3, 2], |i| i as f32 - 2.5));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
        let bad = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.matmul(eye, bad).is_err());
    }

    #[test]
    fn transpose_and_reshape_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let y = g.transpose(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).data()[1], 4.0);
        let z = g.transpose(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
        let r = g.reshape(x, &[6, 4]).unwrap();
        let back = g.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.transpose(x, &[0, 0, 1]).is_err());
        assert!(g.reshape(x, &[5]).is_err());
    }

    #[test]
    fn concat_axis1() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn upsample_corner_anchoring_and_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = g.upsample_bilinear(x, 4, 4, true).unwrap();
        let d = g.value(u).data();
        assert_eq!((d[0], d[3], d[12], d[15]), (1.0, 2.0, 3.0, 4.0));
        let same = g.upsample_bilinear(x, 2, 2, true).unwrap();
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn upsample_half_pixel_keeps_block_centres() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 4.0]));
        let u = g.upsample_bilinear(x, 1, 4, false).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn pad_edge_repeats_last_row_and_column() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.pad_edge(x, 1, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 3, 4]);
        assert_eq!(
            g.value(p).data(),
            &[1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 3.0, 4.0, 4.0, 4.0]
        );
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 3.0, 2.0, 6.0]);
    }

    #[test]
    fn pools() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 2, 4], |i| i as f32));
        let p = g.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 4.5]);
        let gp = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(gp).data(), &[3.5]);
    }

    #[test]
    fn sum_axis_and_scale_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 12.0]);
        let r = g.scale_rows(x, s).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0, 6.0, 36.0, 48.0, 60.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4, 2, 2]));
        let l = g
            .softmax_cross_entropy(x, &[0, 1, 2, 3], &[1.0; 4], 4.0)
            .unwrap();
        assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);
        let empty = g.softmax_cross_entropy(x, &[0; 4], &[0.0; 4], 0.0).unwrap();
        assert_eq!(g.value(empty).item(), 0.0);
        g.backward(empty).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
