//! Voxel lifting, the 3-D UNet completion head, the training losses and the
//! conversion from class logits to a labelled grid.

use crate::camera::{CameraRig, DepthBins};
use crate::error::{arg, shape, Result};
use crate::nn;
use crate::ops;
use crate::params::{Bound, ParamStore};
use crate::tape::{Resampler, Tape, Var};
use crate::tensor::Tensor;
use crate::voxel::{GridSpec, VoxelGrid, FREE};
use rand::Rng;
use std::collections::BTreeMap;

/// Probabilities entering a logarithm are clamped to this band.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SscConfig {
    /// Channels of the first UNet level; the second level doubles it.
    pub unet_width: usize,
    /// `M + 1` output classes.
    pub classes: usize,
}

impl Default for SscConfig {
    fn default() -> Self {
        Self {
            unet_width: 8,
            classes: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub sem: f64,
    pub geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            sem: 1.0,
            geo: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("ce", self.ce), ("sem", self.sem), ("geo", self.geo)] {
            if !(v >= 0.0) || !v.is_finite() {
                return arg(format!("loss weight λ_{n} must be a finite nonnegative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// The four loss terms as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub depth: f64,
    pub ce: f64,
    pub sem: f64,
    pub geo: f64,
}

/// `L_depth + λ_ce·L_ce + λ_sem·L_sem + λ_geo·L_geo`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(parts.depth + w.ce * parts.ce + w.sem * parts.sem + w.geo * parts.geo)
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub depth: Var,
    pub ce: Var,
    pub sem: Var,
    pub geo: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            depth: tape.value(self.depth).item(),
            ce: tape.value(self.ce).item(),
            sem: tape.value(self.sem).item(),
            geo: tape.value(self.geo).item(),
        }
    }
}

pub fn total_loss_taped(tape: &mut Tape, parts: &LossVars, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let ce = tape.scale(parts.ce, w.ce);
    let sem = tape.scale(parts.sem, w.sem);
    let geo = tape.scale(parts.geo, w.geo);
    let a = tape.add(parts.depth, ce)?;
    let b = tape.add(sem, geo)?;
    tape.add(a, b)
}

/// `F_vox[c, d, h, w] = C_bev[c, h, w] · softmax_d(V_ens)[d, h, w]`.
pub fn lift_taped(tape: &mut Tape, context: Var, volume: Var) -> Result<Var> {
    let (cs, vs) = (tape.shape(context).to_vec(), tape.shape(volume).to_vec());
    if cs.len() != 3 || vs.len() != 3 || cs[1..] != vs[1..] {
        return shape(format!("lift needs C×H×W context and D×H×W volume, got {cs:?} and {vs:?}"));
    }
    let dist = tape.softmax(volume, 0)?;
    tape.outer(context, dist)
}

pub fn lift(context: &Tensor, volume: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(context.clone());
    let v = tape.constant(volume.clone());
    let f = lift_taped(&mut tape, c, v)?;
    Ok(tape.value(f).clone())
}

/// Trilinear sample of a `D×H×W` frustum volume at continuous `(t, v, u)`,
/// with zero outside; taps are accumulated into `row`.
fn trilinear_taps(dims: [usize; 3], at: [f64; 3], weight: f64, row: &mut BTreeMap<usize, f64>) {
    let base = at.map(f64::floor);
    for corner in 0..8 {
        let mut w = weight;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = corner >> (2 - a) & 1 == 1;
            let frac = at[a] - base[a];
            let c = base[a] + if hi { 1.0 } else { 0.0 };
            w *= if hi { frac } else { 1.0 - frac };
            if !(c >= 0.0 && c < dims[a] as f64) {
                inside = false;
                break;
            }
            idx[a] = c as usize;
        }
        if inside && w != 0.0 {
            *row.entry((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]).or_insert(0.0) += w;
        }
    }
}

/// Pool the camera frustum `D × H_f × W_f` onto the half-resolution voxel grid.
///
/// Each coarse voxel averages trilinear samples taken at the centres of the
/// eight full-resolution voxels it covers. `rig` must already be scaled to
/// the feature resolution. Samples outside the frustum contribute zero.
pub fn frustum_resampler(
    frustum: [usize; 3],
    grid: &GridSpec,
    rig: &CameraRig,
    bins: &DepthBins,
) -> Result<Resampler> {
    if grid.dims.iter().any(|d| d % 2 != 0) {
        return arg(format!("grid extents {:?} must be even", grid.dims));
    }
    if frustum[0] != bins.count {
        return shape(format!("frustum depth {} vs {} bins", frustum[0], bins.count));
    }
    let half = grid.dims.map(|d| d / 2);
    let mut taps = Vec::with_capacity(half.iter().product());
    for x in 0..half[0] {
        for y in 0..half[1] {
            for z in 0..half[2] {
                let mut row = BTreeMap::new();
                for sub in 0..8 {
                    let p = grid.center(2 * x + (sub >> 2 & 1), 2 * y + (sub >> 1 & 1), 2 * z + (sub & 1));
                    let c = rig.grid_to_camera(p);
                    if let Some((u, v)) = rig.left.project(c) {
                        trilinear_taps(frustum, [bins.coordinate(c[2]), v, u], 0.125, &mut row);
                    }
                }
                taps.push(row.into_iter().collect());
            }
        }
    }
    Resampler::new(&frustum, &half, taps)
}

pub fn init_params<R: Rng>(p: &mut ParamStore, cfg: &SscConfig, in_channels: usize, rng: &mut R) {
    let u = cfg.unet_width;
    p.init_conv("ssc.enc1", u, in_channels, [3, 3, 3], rng);
    p.init_conv("ssc.down", 2 * u, u, [3, 3, 3], rng);
    p.init_conv("ssc.mid", 2 * u, 2 * u, [3, 3, 3], rng);
    p.init_deconv("ssc.up", 2 * u, u, [3, 3, 3], 2, rng);
    p.init_conv("ssc.dec", u, u, [3, 3, 3], rng);
    p.init_deconv("ssc.final_up", u, u, [3, 3, 3], 2, rng);
    p.init_conv("ssc.head", cfg.classes, u, [1, 1, 1], rng);
}

/// Two-level 3-D UNet on `C × H × W × Z`, then a ×2 transposed convolution
/// and a 1×1×1 classifier: output `(M+1) × 2H × 2W × 2Z`.
pub fn unet3d_head_taped(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1..].iter().any(|e| e % 2 != 0) {
        return arg(format!("UNet input must be C×H×W×Z with even extents, got {s:?}"));
    }
    let e1 = nn::conv3(tape, p, "ssc.enc1", x, 1, 1, 1)?;
    let e1 = tape.relu(e1);
    let d = nn::conv3(tape, p, "ssc.down", e1, 2, 1, 1)?;
    let d = tape.relu(d);
    let m = nn::conv3(tape, p, "ssc.mid", d, 1, 1, 1)?;
    let m = tape.relu(m);
    let u = nn::upsample3(tape, p, "ssc.up", m)?;
    let skip = tape.add(u, e1)?;
    let skip = tape.relu(skip);
    let h = nn::conv3(tape, p, "ssc.dec", skip, 1, 1, 1)?;
    let h = tape.relu(h);
    let f = nn::upsample3(tape, p, "ssc.final_up", h)?;
    let f = tape.relu(f);
    nn::conv3(tape, p, "ssc.head", f, 1, 0, 1)
}

pub fn unet3d_head(x: &Tensor, weights: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = unet3d_head_taped(&mut tape, &p, xv)?;
    Ok(tape.value(y).clone())
}

/// One-hot nearest-bin depth targets on the feature grid.
#[derive(Clone, Debug)]
pub struct DepthTarget {
    /// `D × H_f × W_f`, one-hot on valid pixels, zero elsewhere.
    pub onehot: Tensor,
    /// `H_f × W_f`, 1 for valid pixels.
    pub mask: Tensor,
    pub valid: usize,
}

impl DepthTarget {
    /// Build from a feature-resolution depth map (`None` = no depth).
    pub fn from_depths(depths: &[Option<f64>], h: usize, w: usize, bins: &DepthBins) -> Result<Self> {
        if depths.len() != h * w {
            return shape(format!("{} depths for a {h}×{w} grid", depths.len()));
        }
        let n = h * w;
        let mut onehot = vec![0.0; bins.count * n];
        let mut mask = vec![0.0; n];
        let mut valid = 0;
        for (i, z) in depths.iter().enumerate() {
            if let Some(b) = z.and_then(|z| bins.nearest(z)) {
                onehot[b * n + i] = 1.0;
                mask[i] = 1.0;
                valid += 1;
            }
        }
        Ok(Self {
            onehot: Tensor::new(&[bins.count, h, w], onehot)?,
            mask: Tensor::new(&[h, w], mask)?,
            valid,
        })
    }
}

/// A scalar loss term plus whether it fell back to zero for lack of data.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub value: Var,
    pub degenerate: bool,
}

fn clamped_ln(tape: &mut Tape, p: Var) -> Var {
    let c = tape.clamp(p, LOG_CLAMP, 1.0 - LOG_CLAMP);
    tape.ln(c)
}

fn zero_term(tape: &mut Tape) -> Term {
    Term {
        value: tape.constant(Tensor::scalar(0.0)),
        degenerate: true,
    }
}

/// Per-bin binary cross-entropy between `softmax_d(V_ens)` and the one-hot
/// target, averaged over bins and valid pixels.
pub fn depth_loss_taped(tape: &mut Tape, volume: Var, target: &DepthTarget) -> Result<Term> {
    if tape.shape(volume) != target.onehot.shape() {
        return shape(format!(
            "depth logits {:?} vs target {:?}",
            tape.shape(volume),
            target.onehot.shape()
        ));
    }
    if target.valid == 0 {
        log::warn!("depth loss has no valid pixels; contributing 0");
        return Ok(zero_term(tape));
    }
    let d = target.onehot.shape()[0];
    let p = tape.softmax(volume, 0)?;
    let lp = clamped_ln(tape, p);
    let q = tape.one_minus(p);
    let lq = clamped_ln(tape, q);
    let t = tape.constant(target.onehot.clone());
    let mask_d: Vec<f64> = (0..d).flat_map(|_| target.mask.data().iter().copied()).collect();
    let m = tape.constant(Tensor::new(target.onehot.shape(), mask_d.clone())?);
    let not_t = tape.constant(Tensor::new(
        target.onehot.shape(),
        target.onehot.data().iter().zip(&mask_d).map(|(t, m)| m * (1.0 - t)).collect(),
    )?);
    let a = tape.mul(t, lp)?;
    let a = tape.mul(a, m)?;
    let b = tape.mul(not_t, lq)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(Term {
        value: tape.scale(s, -1.0 / (target.valid * d) as f64),
        degenerate: false,
    })
}

/// Inverse log-frequency class weights `1 / ln(1.02 + f_c)` over the valid
/// voxels of the given grids.
pub fn class_weights(grids: &[&VoxelGrid], classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for g in grids {
        for (&l, &inv) in g.labels.iter().zip(&g.invalid) {
            if !inv && (l as usize) < classes {
                counts[l as usize] += 1;
                total += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&c| {
            let f = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            1.0 / (1.02 + f).ln()
        })
        .collect()
}

fn check_logits(tape: &Tape, logits: Var, gt: &VoxelGrid) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 4 || s[1..] != gt.dims || s[0] != gt.class_count {
        return shape(format!(
            "class logits {s:?} vs grid {:?} with {} classes",
            gt.dims, gt.class_count
        ));
    }
    Ok(s[0])
}

/// Weighted cross-entropy, normalised by the total weight of the counted voxels.
pub fn class_weighted_ce_taped(tape: &mut Tape, logits: Var, gt: &VoxelGrid, weights: &[f64]) -> Result<Term> {
    let c = check_logits(tape, logits, gt)?;
    if weights.len() != c {
        return arg(format!("{} class weights for {c} classes", weights.len()));
    }
    let n = gt.len();
    let mut wt = vec![0.0; c * n];
    let mut norm = 0.0;
    for i in 0..n {
        if !gt.invalid[i] {
            let l = gt.labels[i] as usize;
            wt[l * n + i] = weights[l];
            norm += weights[l];
        }
    }
    if norm == 0.0 {
        log::warn!("cross-entropy has no weighted voxels; contributing 0");
        return Ok(zero_term(tape));
    }
    let p = tape.softmax(logits, 0)?;
    let lp = clamped_ln(tape, p);
    let w = tape.constant(Tensor::new(tape.shape(logits), wt)?);
    let s = tape.mul(w, lp)?;
    let s = tape.sum(s);
    Ok(Term {
        value: tape.scale(s, -1.0 / norm),
        degenerate: false,
    })
}

/// `−ln precision − ln recall − ln specificity` of a soft mask `p` against a
/// binary target `t`, restricted to `valid`. Terms with an empty denominator
/// are dropped.
fn affinity_terms(tape: &mut Tape, p: Var, t: &[f64], valid: &[f64]) -> Result<Option<Var>> {
    let t_sum: f64 = t.iter().sum();
    if t_sum == 0.0 {
        return Ok(None);
    }
    let s = tape.shape(p).to_vec();
    let tv = tape.constant(Tensor::new(&s, t.to_vec())?);
    let vv = tape.constant(Tensor::new(&s, valid.to_vec())?);
    let neg: Vec<f64> = t.iter().zip(valid).map(|(t, v)| v * (1.0 - t)).collect();
    let neg_sum: f64 = neg.iter().sum();
    let nv = tape.constant(Tensor::new(&s, neg)?);

    let pt = tape.mul(p, tv)?;
    let tp = tape.sum(pt);
    let pv = tape.mul(p, vv)?;
    let p_sum = tape.sum(pv);

    let mut terms = Vec::new();
    let precision = tape.div(tp, p_sum)?;
    terms.push(clamped_ln(tape, precision));
    let recall = tape.scale(tp, 1.0 / t_sum);
    terms.push(clamped_ln(tape, recall));
    if neg_sum > 0.0 {
        let q = tape.one_minus(p);
        let qn = tape.mul(q, nv)?;
        let tn = tape.sum(qn);
        let spec = tape.scale(tn, 1.0 / neg_sum);
        terms.push(clamped_ln(tape, spec));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, -1.0)))
}

/// Class-wise affinity losses: `L_sem` averages the precision/recall/
/// specificity terms over the semantic classes present in the ground truth;
/// `L_geo` applies the same terms to the occupied-versus-free split.
pub fn sem_geo_losses_taped(tape: &mut Tape, logits: Var, gt: &VoxelGrid) -> Result<(Term, Term)> {
    let c = check_logits(tape, logits, gt)?;
    let n = gt.len();
    let valid: Vec<f64> = gt.invalid.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
    let probs = tape.softmax(logits, 0)?;

    let mut sem_terms = Vec::new();
    for cls in 1..c {
        let t: Vec<f64> = (0..n)
            .map(|i| if !gt.invalid[i] && gt.labels[i] as usize == cls { 1.0 } else { 0.0 })
            .collect();
        let pc = tape.narrow(probs, cls, 1)?;
        if let Some(term) = affinity_terms(tape, pc, &t, &valid)? {
            sem_terms.push(term);
        }
    }
    let sem = if sem_terms.is_empty() {
        zero_term(tape)
    } else {
        let mut acc = sem_terms[0];
        for &t in &sem_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Term {
            value: tape.scale(acc, 1.0 / sem_terms.len() as f64),
            degenerate: false,
        }
    };

    let occ_t: Vec<f64> = (0..n)
        .map(|i| if !gt.invalid[i] && gt.labels[i] != FREE { 1.0 } else { 0.0 })
        .collect();
    let free = tape.narrow(probs, 0, 1)?;
    let occ = tape.one_minus(free);
    let geo = match affinity_terms(tape, occ, &occ_t, &valid)? {
        Some(v) => Term {
            value: v,
            degenerate: false,
        },
        None => zero_term(tape),
    };
    Ok((sem, geo))
}

/// Per-voxel argmax over the class axis (ties pick the lower class).
pub fn predict_grid(logits: &Tensor) -> Result<VoxelGrid> {
    let s = logits.shape();
    if s.len() != 4 {
        return shape(format!("class logits must be (M+1)×H×W×Z, got {s:?}"));
    }
    let (_, idx) = ops::max_along(logits, 0)?;
    let mut g = VoxelGrid::new([s[1], s[2], s[3]], s[0]);
    g.labels = idx.into_iter().map(|i| i as u16).collect();
    Ok(g)
}

/// Class probabilities from logits.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    ops::softmax_along(logits, 0)
}
