//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! are appended in execution order; [`Tape::backward`] walks the record in
//! exact reverse order and accumulates gradients for every node that depends
//! on a leaf created with [`Tape::leaf`].

use crate::error::{arg, shape, Result};
use crate::ops::{self, axis_split, col2im, gemm, gemm_nt, gemm_tn, im2col, ConvGeom, ConvSpec};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map over the spatial part of a `C × spatial` tensor.
///
/// Output position `j` receives `Σ weight · input[i]` over the entries
/// `offsets[j]..offsets[j+1]`. Used for fixed geometric resampling
/// (disparity-to-depth slices, frustum-to-voxel pooling).
#[derive(Clone, Debug)]
pub struct Resampler {
    pub in_spatial: Vec<usize>,
    pub out_spatial: Vec<usize>,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl Resampler {
    /// Build from per-output lists of `(input index, weight)`.
    pub fn new(
        in_spatial: &[usize],
        out_spatial: &[usize],
        taps: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let n_in: usize = in_spatial.iter().product();
        let n_out: usize = out_spatial.iter().product();
        if taps.len() != n_out {
            return shape(format!("resampler has {} rows for {n_out} outputs", taps.len()));
        }
        let mut offsets = Vec::with_capacity(n_out + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in taps {
            for (i, w) in row {
                if i >= n_in {
                    return arg(format!("resampler source {i} out of range {n_in}"));
                }
                sources.push(i);
                weights.push(w);
            }
            offsets.push(sources.len());
        }
        Ok(Self {
            in_spatial: in_spatial.to_vec(),
            out_spatial: out_spatial.to_vec(),
            offsets,
            sources,
            weights,
        })
    }

    fn n_in(&self) -> usize {
        self.in_spatial.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_spatial.iter().product()
    }

    pub fn taps(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[j]..self.offsets[j + 1];
        self.sources[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Apply to a `C × in_spatial` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let n_in = self.n_in();
        if x.len() % n_in != 0 || x.shape()[1..] != self.in_spatial[..] {
            return shape(format!(
                "resampler expects C×{:?}, got {:?}",
                self.in_spatial,
                x.shape()
            ));
        }
        let c = x.shape()[0];
        let n_out = self.n_out();
        let mut out = vec![0.0; c * n_out];
        for ch in 0..c {
            let src = &x.data()[ch * n_in..(ch + 1) * n_in];
            let dst = &mut out[ch * n_out..(ch + 1) * n_out];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = self.taps(j).map(|(i, w)| w * src[i]).sum();
            }
        }
        let mut s = vec![c];
        s.extend_from_slice(&self.out_spatial);
        Tensor::new(&s, out)
    }

    fn adjoint(&self, g: &[f64], c: usize) -> Vec<f64> {
        let n_in = self.n_in();
        let n_out = self.n_out();
        let mut out = vec![0.0; c * n_in];
        for ch in 0..c {
            let gs = &g[ch * n_out..(ch + 1) * n_out];
            let dst = &mut out[ch * n_in..(ch + 1) * n_in];
            for (j, &gv) in gs.iter().enumerate() {
                for (i, w) in self.taps(j) {
                    dst[i] += w * gv;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Softmax(Var, usize),
    MaxAlong(Var, usize, Vec<usize>),
    Conv(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom),
    AddBias(Var, Var),
    ChannelScale(Var, Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    GroupNorm(Var, usize, Vec<f64>),
    Outer(Var, Var),
    Resample(Var, Arc<Resampler>),
    GroupCorrelation(Var, Var, usize),
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    tracked: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked[x.0];
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let t = self.any_tracked(&[a, b]);
        self.push(value, op, t)
    }

    /// A leaf that requires a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.binary(a, b, v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e + s);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::gelu);
        self.unary(x, v, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.unary(x, v, Op::Ln(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        Ok(self.unary(x, v, Op::Transpose(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, v, Op::Matmul(a, b)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax_along(self.value(x), axis)?;
        Ok(self.unary(x, v, Op::Softmax(x, axis)))
    }

    pub fn max_along(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (v, idx) = ops::max_along(self.value(x), axis)?;
        Ok(self.unary(x, v, Op::MaxAlong(x, axis, idx)))
    }

    pub fn conv(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let g = ops::conv_geom(self.value(x), self.value(k), spec)?;
        let v = ops::conv(self.value(x), self.value(k), spec)?;
        Ok(self.binary(x, k, v, Op::Conv(x, k, g)))
    }

    pub fn conv_transpose(
        &mut self,
        x: Var,
        k: Var,
        spec: ConvSpec,
        output_padding: [usize; 3],
    ) -> Result<Var> {
        let g = ops::conv_transpose_geom(self.value(x), self.value(k), spec, output_padding)?;
        let v = ops::conv_transpose(self.value(x), self.value(k), spec, output_padding)?;
        Ok(self.binary(x, k, v, Op::ConvTranspose(x, k, g)))
    }

    /// Add `bias[c]` to every entry of channel `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let b = self.value(bias);
        if b.shape() != [c] {
            return shape(format!("bias {:?} for {c} channels", b.shape()));
        }
        let per = xv.len() / c;
        let mut out = xv.data().to_vec();
        for (ch, bv) in out.chunks_mut(per).zip(b.data()) {
            ch.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.binary(x, bias, v, Op::AddBias(x, bias)))
    }

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = ops::channel_scale(self.value(x), self.value(s))?;
        Ok(self.binary(x, s, v, Op::ChannelScale(x, s)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.unary(x, v, Op::GlobalAvgPool(x)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::concat_channels(&ts)?;
        let t = self.any_tracked(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), t))
    }

    /// Channels `start..start+len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        if len == 0 || start + len > c {
            return arg(format!("narrow {start}+{len} of {c} channels"));
        }
        let per = xv.len() / c;
        let mut s = xv.shape().to_vec();
        s[0] = len;
        let v = Tensor::new(&s, xv.data()[start * per..(start + len) * per].to_vec())?;
        Ok(self.unary(x, v, Op::Narrow(x, start)))
    }

    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).shape()[0];
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return arg(format!("split sizes {sizes:?} do not partition {c} channels"));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Group normalization over the leading axis, without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (v, _, rstd) = ops::group_norm_raw(self.value(x), groups, eps)?;
        Ok(self.unary(x, v, Op::GroupNorm(x, groups, rstd)))
    }

    /// `out[c, d, s] = a[c, s] · b[d, s]` for `a: C×S…`, `b: D×S…`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[1..] != bv.shape()[1..] {
            return shape(format!(
                "outer product extents {:?} vs {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let c = av.shape()[0];
        let d = bv.shape()[0];
        let s = av.len() / c;
        let mut out = vec![0.0; c * d * s];
        for ci in 0..c {
            let ar = &av.data()[ci * s..(ci + 1) * s];
            for di in 0..d {
                let br = &bv.data()[di * s..(di + 1) * s];
                let dst = &mut out[(ci * d + di) * s..(ci * d + di + 1) * s];
                for ((o, x), y) in dst.iter_mut().zip(ar).zip(br) {
                    *o = x * y;
                }
            }
        }
        let mut shp = vec![c, d];
        shp.extend_from_slice(&av.shape()[1..]);
        let v = Tensor::new(&shp, out)?;
        Ok(self.binary(a, b, v, Op::Outer(a, b)))
    }

    pub fn resample(&mut self, x: Var, r: &Arc<Resampler>) -> Result<Var> {
        let v = r.apply(self.value(x))?;
        Ok(self.unary(x, v, Op::Resample(x, Arc::clone(r))))
    }

    /// Group-wise correlation volume, see [`ops::group_correlation`].
    pub fn group_correlation(
        &mut self,
        left: Var,
        right: Var,
        groups: usize,
        max_disparity: usize,
    ) -> Result<Var> {
        let v = ops::group_correlation(self.value(left), self.value(right), groups, max_disparity)?;
        Ok(self.binary(left, right, v, Op::GroupCorrelation(left, right, groups)))
    }

    /// Populate gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.tracked[i])
                    .map(|d| Tensor::new(self.values[i].shape(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.values[v.0].data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.tracked[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = self.values[i].data();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, g.iter().zip(y).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| -g * (x / y) / y)
                        .collect(),
                );
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| g * ops::gelu_grad(*x))
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Ln(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.values[a.0].len()]),
            Op::Transpose(a) => {
                let s = self.values[i].shape();
                let gt = Tensor::new(s, g.to_vec())
                    .and_then(|t| t.transpose2())
                    .expect("transpose grad");
                acc(*a, gt.into_data());
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracked[a.0] {
                    acc(*a, gemm_nt(g, val(*b), m, n, k));
                }
                if self.tracked[b.0] {
                    acc(*b, gemm_tn(val(*a), g, m, k, n));
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(self.values[i].shape(), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + j;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::MaxAlong(a, axis, idx) => {
                let (outer, n, inner) = axis_split(self.values[a.0].shape(), *axis);
                let mut gx = vec![0.0; self.values[a.0].len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let k = idx[o * inner + j];
                        gx[o * n * inner + k * inner + j] += g[o * inner + j];
                    }
                }
                acc(*a, gx);
            }
            Op::Conv(x, k, geom) => {
                let ks = self.values[k.0].shape();
                let (o, c) = (ks[0], ks[1]);
                let ck = c * ks[2] * ks[3] * ks[4];
                let npix: usize = geom.cols.iter().product();
                if self.tracked[k.0] {
                    let col = im2col(val(*x), c, geom);
                    acc(*k, gemm_nt(g, &col, o, npix, ck));
                }
                if self.tracked[x.0] {
                    let gcol = gemm_tn(val(*k), g, o, ck, npix);
                    acc(*x, col2im(&gcol, c, geom));
                }
            }
            Op::ConvTranspose(x, k, geom) => {
                let ks = self.values[k.0].shape();
                let (o, c) = (ks[0], ks[1]);
                let ck = c * ks[2] * ks[3] * ks[4];
                let npix: usize = geom.cols.iter().product();
                let gcol = im2col(g, c, geom);
                if self.tracked[k.0] {
                    acc(*k, gemm_nt(val(*x), &gcol, o, npix, ck));
                }
                if self.tracked[x.0] {
                    acc(*x, gemm(val(*k), &gcol, o, ck, npix));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.to_vec());
                let c = self.values[b.0].len();
                let per = g.len() / c;
                acc(*b, g.chunks(per).map(|ch| ch.iter().sum()).collect());
            }
            Op::ChannelScale(x, s) => {
                let sv = val(*s);
                let c = sv.len();
                let per = g.len() / c;
                if self.tracked[x.0] {
                    let mut gx = g.to_vec();
                    for (ch, f) in gx.chunks_mut(per).zip(sv) {
                        ch.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*x, gx);
                }
                if self.tracked[s.0] {
                    let xv = val(*x);
                    acc(
                        *s,
                        g.chunks(per)
                            .zip(xv.chunks(per))
                            .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                            .collect(),
                    );
                }
            }
            Op::GlobalAvgPool(x) => {
                let n = self.values[x.0].len();
                let per = n / g.len();
                let mut gx = Vec::with_capacity(n);
                for gv in g {
                    gx.extend(std::iter::repeat(gv / per as f64).take(per));
                }
                acc(*x, gx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.values[p.0].len();
                    acc(*p, g[start..start + len].to_vec());
                    start += len;
                }
            }
            Op::Narrow(x, start) => {
                let xs = self.values[x.0].shape();
                let per = self.values[x.0].len() / xs[0];
                let mut gx = vec![0.0; self.values[x.0].len()];
                gx[start * per..start * per + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::GroupNorm(x, groups, rstd) => {
                let glen = g.len() / groups;
                let mut gx = vec![0.0; g.len()];
                for gi in 0..*groups {
                    let r = gi * glen..(gi + 1) * glen;
                    let (gg, yy) = (&g[r.clone()], &out[r.clone()]);
                    let mg = gg.iter().sum::<f64>() / glen as f64;
                    let mgy = gg.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / glen as f64;
                    for ((d, gv), yv) in gx[r].iter_mut().zip(gg).zip(yy) {
                        *d = rstd[gi] * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, gx);
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = self.values[a.0].shape()[0];
                let d = self.values[b.0].shape()[0];
                let s = av.len() / c;
                if self.tracked[a.0] {
                    let mut ga = vec![0.0; av.len()];
                    for ci in 0..c {
                        for di in 0..d {
                            let gr = &g[(ci * d + di) * s..(ci * d + di + 1) * s];
                            let br = &bv[di * s..(di + 1) * s];
                            for ((o, x), y) in ga[ci * s..(ci + 1) * s].iter_mut().zip(gr).zip(br) {
                                *o += x * y;
                            }
                        }
                    }
                    acc(*a, ga);
                }
                if self.tracked[b.0] {
                    let mut gb = vec![0.0; bv.len()];
                    for ci in 0..c {
                        let ar = &av[ci * s..(ci + 1) * s];
                        for di in 0..d {
                            let gr = &g[(ci * d + di) * s..(ci * d + di + 1) * s];
                            for ((o, x), y) in gb[di * s..(di + 1) * s].iter_mut().zip(gr).zip(ar) {
                                *o += x * y;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Resample(x, r) => {
                let c = self.values[x.0].shape()[0];
                acc(*x, r.adjoint(g, c));
            }
            Op::GroupCorrelation(l, r, groups) => {
                let nd = self.values[i].shape()[1];
                let (gl, gr) = ops::group_correlation_grads(
                    &self.values[l.0],
                    &self.values[r.0],
                    g,
                    *groups,
                    nd,
                );
                acc(*l, gl);
                acc(*r, gr);
            }
        }
    }
}
