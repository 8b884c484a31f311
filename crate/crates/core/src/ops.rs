//! Forward kernels on plain tensors.
//!
//! These are the pure, untaped versions of every differentiable operation.
//! [`crate::tape::Tape`] records the same kernels and adds their adjoints.
//! Every kernel accumulates each output element in a fixed index order, so
//! results do not depend on how many threads rayon uses.

use crate::error::{arg, shape, Result};
use crate::tensor::{strides_of, Tensor};
use rayon::prelude::*;

/// Per-axis geometry of a 3-D (or degenerate 2-D) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvSpec {
    pub fn cubic(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad: [pad; 3],
            dilation: [dilation; 3],
        }
    }

    /// 2-D convolution embedded as a depth-1 3-D convolution.
    pub fn planar(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            dilation: [1, dilation, dilation],
        }
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    /// Extents of the "image" side (conv input / transposed-conv output).
    pub image: [usize; 3],
    pub kernel: [usize; 3],
    /// Extents of the "column" side (conv output / transposed-conv input).
    pub cols: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn for_conv(image: [usize; 3], kernel: [usize; 3], spec: ConvSpec) -> Result<Self> {
        let mut cols = [0; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 || spec.dilation[a] == 0 {
                return arg("stride and dilation must be positive");
            }
            let span = spec.dilation[a] * (kernel[a] - 1) + 1;
            let padded = image[a] + 2 * spec.pad[a];
            if padded < span {
                return arg(format!(
                    "nonpositive output extent on axis {a}: input {}, pad {}, kernel span {span}",
                    image[a], spec.pad[a]
                ));
            }
            cols[a] = (padded - span) / spec.stride[a] + 1;
        }
        Ok(Self {
            image,
            kernel,
            cols,
            spec,
        })
    }

    pub fn for_transpose(
        cols: [usize; 3],
        kernel: [usize; 3],
        spec: ConvSpec,
        output_padding: [usize; 3],
    ) -> Result<Self> {
        let mut image = [0; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 || spec.dilation[a] == 0 {
                return arg("stride and dilation must be positive");
            }
            if output_padding[a] >= spec.stride[a].max(spec.dilation[a]) {
                return arg("output padding must be smaller than stride or dilation");
            }
            let full = (cols[a] - 1) * spec.stride[a]
                + spec.dilation[a] * (kernel[a] - 1)
                + 1
                + output_padding[a];
            if full <= 2 * spec.pad[a] {
                return arg(format!("nonpositive transposed-conv output extent on axis {a}"));
            }
            image[a] = full - 2 * spec.pad[a];
        }
        let g = Self {
            image,
            kernel,
            cols,
            spec,
        };
        // the transposed geometry must round-trip through the forward formula
        let fwd = Self::for_conv(image, kernel, spec)?;
        if fwd.cols != cols {
            return arg("transposed convolution geometry is not invertible");
        }
        Ok(g)
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn npix(&self) -> usize {
        self.cols.iter().product()
    }

    fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    /// Input coordinate hit by output coordinate `o` and tap `k` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.spec.stride[a] + k * self.spec.dilation[a]) as isize
            - self.spec.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.image[a]).then_some(pos as usize)
    }
}

/// Unfold a `C × image` buffer into `[C·kvol, npix]` columns.
pub(crate) fn im2col(x: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let kvol = g.kvol();
    let npix = g.npix();
    let [_, ih, iw] = g.image;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.cols;
    let ilen = g.image_len();
    let mut col = vec![0.0; channels * kvol * npix];
    col.par_chunks_mut(npix)
        .enumerate()
        .for_each(|(row, dst)| {
            let c = row / kvol;
            let t = row % kvol;
            let (a, b, e) = (t / (kh * kw), (t / kw) % kh, t % kw);
            let _ = kd;
            let xc = &x[c * ilen..(c + 1) * ilen];
            for zo in 0..od {
                let Some(zi) = g.src(0, zo, a) else { continue };
                for yo in 0..oh {
                    let Some(yi) = g.src(1, yo, b) else { continue };
                    let base = (zi * ih + yi) * iw;
                    let out = &mut dst[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                    for (xo, slot) in out.iter_mut().enumerate() {
                        if let Some(xi) = g.src(2, xo, e) {
                            *slot = xc[base + xi];
                        }
                    }
                }
            }
        });
    col
}

/// Fold `[C·kvol, npix]` columns back into a `C × image` buffer, summing overlaps.
pub(crate) fn col2im(col: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let kvol = g.kvol();
    let npix = g.npix();
    let [_, ih, iw] = g.image;
    let [_, kh, kw] = g.kernel;
    let [od, oh, ow] = g.cols;
    let ilen = g.image_len();
    let mut out = vec![0.0; channels * ilen];
    out.par_chunks_mut(ilen).enumerate().for_each(|(c, xc)| {
        for t in 0..kvol {
            let (a, b, e) = (t / (kh * kw), (t / kw) % kh, t % kw);
            let src = &col[(c * kvol + t) * npix..(c * kvol + t + 1) * npix];
            for zo in 0..od {
                let Some(zi) = g.src(0, zo, a) else { continue };
                for yo in 0..oh {
                    let Some(yi) = g.src(1, yo, b) else { continue };
                    let base = (zi * ih + yi) * iw;
                    let row = &src[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                    for (xo, &v) in row.iter().enumerate() {
                        if let Some(xi) = g.src(2, xo, e) {
                            xc[base + xi] += v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// `out[m, n] = Σ_k a[m, k] · b[k, n]`, accumulated in increasing `k`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[m, n] = Σ_k a[k, m] · b[k, n]` (left operand transposed).
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[m, n] = Σ_k a[m, k] · b[n, k]` (right operand transposed).
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            *o = s;
        }
    });
    out
}

fn vol_extents(x: &Tensor, what: &str) -> Result<(usize, [usize; 3])> {
    x.expect_rank(4, what)?;
    let s = x.shape();
    Ok((s[0], [s[1], s[2], s[3]]))
}

fn kernel_extents(k: &Tensor) -> Result<(usize, usize, [usize; 3])> {
    k.expect_rank(5, "convolution kernel")?;
    let s = k.shape();
    Ok((s[0], s[1], [s[2], s[3], s[4]]))
}

pub(crate) fn conv_geom(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Result<ConvGeom> {
    let (c, ext) = vol_extents(x, "conv input")?;
    let (_, kc, kext) = kernel_extents(k)?;
    if kc != c {
        return shape(format!(
            "conv kernel expects {kc} input channels, input has {c}"
        ));
    }
    ConvGeom::for_conv(ext, kext, spec)
}

/// General 3-D convolution of `C×D×H×W` by `O×C×kd×kh×kw`.
pub fn conv(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geom(x, k, spec)?;
    let (o, c, _) = kernel_extents(k)?;
    let col = im2col(x.data(), c, &g);
    let out = gemm(k.data(), &col, o, c * g.kvol(), g.npix());
    Tensor::new(&[o, g.cols[0], g.cols[1], g.cols[2]], out)
}

/// Cubic-kernel 3-D convolution with uniform stride, padding and dilation.
pub fn conv3d(x: &Tensor, k: &Tensor, stride: usize, pad: usize, dilation: usize) -> Result<Tensor> {
    let (_, _, kext) = kernel_extents(k)?;
    if kext[0] != kext[1] || kext[1] != kext[2] || kext[0] % 2 == 0 {
        return arg(format!("conv3d kernel must be odd and cubic, got {kext:?}"));
    }
    conv(x, k, ConvSpec::cubic(stride, pad, dilation))
}

pub(crate) fn conv_transpose_geom(
    x: &Tensor,
    k: &Tensor,
    spec: ConvSpec,
    output_padding: [usize; 3],
) -> Result<ConvGeom> {
    let (ci, ext) = vol_extents(x, "transposed conv input")?;
    let (ko, _, kext) = kernel_extents(k)?;
    if ko != ci {
        return shape(format!(
            "transposed conv kernel expects {ko} input channels, input has {ci}"
        ));
    }
    ConvGeom::for_transpose(ext, kext, spec, output_padding)
}

/// Adjoint of [`conv`] with the same kernel: maps `O` channels back to `C`.
pub fn conv_transpose(
    x: &Tensor,
    k: &Tensor,
    spec: ConvSpec,
    output_padding: [usize; 3],
) -> Result<Tensor> {
    let g = conv_transpose_geom(x, k, spec, output_padding)?;
    let (o, c, _) = kernel_extents(k)?;
    let col = gemm_tn(k.data(), x.data(), o, c * g.kvol(), g.npix());
    let img = col2im(&col, c, &g);
    Tensor::new(&[c, g.image[0], g.image[1], g.image[2]], img)
}

/// Cubic transposed convolution with uniform stride/padding and `output_padding`.
pub fn conv_transpose3d(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor> {
    conv_transpose(x, k, ConvSpec::cubic(stride, pad, 1), [output_padding; 3])
}

/// Sizes around `axis`: (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_along(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return arg(format!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(src[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[at(j)] /= s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Maximum along `axis` with first-index tie breaking; returns values and argmax.
pub fn max_along(x: &Tensor, axis: usize) -> Result<(Tensor, Vec<usize>)> {
    if axis >= x.rank() {
        return arg(format!("max axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut vals = Vec::with_capacity(outer * inner);
    let mut idx = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut bv = src[o * n * inner + i];
            for j in 1..n {
                let v = src[o * n * inner + j * inner + i];
                if v > bv {
                    bv = v;
                    best = j;
                }
            }
            vals.push(bv);
            idx.push(best);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok((Tensor::new(&shape, vals)?, idx))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return shape(format!("matmul inner extents {k} vs {k2}"));
    }
    Tensor::new(&[m, n], gemm(a.data(), b.data(), m, k, n))
}

/// Mean over everything but the leading (channel) axis.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return shape("global_avg_pool needs a channel axis and at least one spatial axis");
    }
    let c = x.shape()[0];
    let per = x.len() / c;
    let out = x
        .data()
        .chunks(per)
        .map(|ch| ch.iter().sum::<f64>() / per as f64)
        .collect();
    Tensor::new(&[c], out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(v: f64) -> f64 {
    0.5 * erfc(-v / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(v: f64) -> f64 {
    v * normal_cdf(v)
}

pub fn gelu_grad(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

/// Complementary error function, relative error below 1e-15 on the real line.
///
/// Continued-fraction tail for |x| > 2.5 and the Maclaurin series of erf below.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        // erf series: 2/√π Σ (-1)^n x^(2n+1) / (n! (2n+1))
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        1.0 - sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // Lentz evaluation of erfc(x) = exp(-x²)/√π · 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
        let tiny = 1e-300;
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for i in 1..300 {
            let a = i as f64 / 2.0;
            d = x + a * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = x + a / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
    }
}

/// Concatenate along the leading (channel) axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return arg("concat of zero tensors");
    };
    let rest = &first.shape()[1..];
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        if &p.shape()[1..] != rest {
            return shape(format!(
                "concat extents {:?} vs {:?}",
                p.shape(),
                first.shape()
            ));
        }
        c += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut s = vec![c];
    s.extend_from_slice(rest);
    Tensor::new(&s, data)
}

/// Split the leading axis into consecutive groups of the given sizes.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let c = x.shape()[0];
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return arg(format!("split sizes {sizes:?} do not partition {c} channels"));
    }
    let per: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut shp = x.shape().to_vec();
        shp[0] = s;
        out.push(Tensor::new(
            &shp,
            x.data()[start * per..(start + s) * per].to_vec(),
        )?);
        start += s;
    }
    Ok(out)
}

/// Multiply every entry of channel `c` by `scale[c]`.
pub fn channel_scale(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let c = x.shape()[0];
    if scale.shape() != [c] {
        return shape(format!(
            "channel scale {:?} for {c} channels",
            scale.shape()
        ));
    }
    let per = x.len() / c;
    let mut out = x.data().to_vec();
    for (ch, s) in out.chunks_mut(per).zip(scale.data()) {
        ch.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(x.shape(), out)
}

/// Group normalization over the leading axis (no affine part).
///
/// Returns the normalized tensor together with per-group mean and inverse std.
pub(crate) fn group_norm_raw(
    x: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = x.shape()[0];
    if groups == 0 || c % groups != 0 {
        return arg(format!("{groups} groups do not divide {c} channels"));
    }
    let glen = x.len() / groups;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for (g, (src, dst)) in x.data().chunks(glen).zip(out.chunks_mut(glen)).enumerate() {
        let _ = g;
        let mean = src.iter().sum::<f64>() / glen as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, means, rstds))
}

/// Row-major strides, exposed for modules that index volumes by hand.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
}

/// Group-wise correlation of `N_c×H×W` feature maps.
///
/// `out[g, d, y, x] = (N_g / N_c) · Σ_{c ∈ g} l[c, y, x] · r[c, y, x − d]`,
/// with right samples left of the image border contributing zero.
pub fn group_correlation(
    left: &Tensor,
    right: &Tensor,
    groups: usize,
    max_disparity: usize,
) -> Result<Tensor> {
    left.expect_rank(3, "left features")?;
    left.expect_same_shape(right)?;
    let [nc, h, w] = [left.shape()[0], left.shape()[1], left.shape()[2]];
    if groups == 0 || nc % groups != 0 {
        return arg(format!("{nc} feature channels are not divisible by {groups} groups"));
    }
    let cpg = nc / groups;
    let nd = max_disparity + 1;
    let (l, r) = (left.data(), right.data());
    let mut out = vec![0.0; groups * nd * h * w];
    for g in 0..groups {
        for d in 0..nd {
            for y in 0..h {
                for x in d..w {
                    let mut s = 0.0;
                    for c in g * cpg..(g + 1) * cpg {
                        s += l[(c * h + y) * w + x] * r[(c * h + y) * w + x - d];
                    }
                    out[((g * nd + d) * h + y) * w + x] = s / cpg as f64;
                }
            }
        }
    }
    Tensor::new(&[groups, nd, h, w], out)
}

/// Adjoint of [`group_correlation`] for an upstream gradient `g`.
pub(crate) fn group_correlation_grads(
    left: &Tensor,
    right: &Tensor,
    g: &[f64],
    groups: usize,
    nd: usize,
) -> (Vec<f64>, Vec<f64>) {
    let [nc, h, w] = [left.shape()[0], left.shape()[1], left.shape()[2]];
    let cpg = nc / groups;
    let (l, r) = (left.data(), right.data());
    let mut gl = vec![0.0; l.len()];
    let mut gr = vec![0.0; r.len()];
    for c in 0..nc {
        let grp = c / cpg;
        for d in 0..nd {
            for y in 0..h {
                for x in d..w {
                    let gv = g[((grp * nd + d) * h + y) * w + x] / cpg as f64;
                    gl[(c * h + y) * w + x] += gv * r[(c * h + y) * w + x - d];
                    gr[(c * h + y) * w + x - d] += gv * l[(c * h + y) * w + x];
                }
            }
        }
    }
    (gl, gr)
}
