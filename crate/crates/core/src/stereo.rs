//! Stereo geometric volume: shared-weight feature encoder, group-wise
//! correlation, disparity→depth resampling and stacked 3-D hourglasses.

use crate::camera::{CameraRig, DepthBins};
use crate::error::{arg, shape, Result};
use crate::nn;
use crate::ops::ConvSpec;
use crate::params::{Bound, ParamStore};
use crate::tape::{Resampler, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::sync::Arc;

/// Spatial downscale of the feature encoder (two stride-2 layers).
pub const ENCODER_DOWNSCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StereoConfig {
    /// Widths of the two strided encoder layers.
    pub encoder_widths: [usize; 2],
    /// Feature channels `N_c`.
    pub feature_channels: usize,
    /// Correlation groups `N_g`.
    pub groups: usize,
    /// Largest disparity at feature resolution.
    pub max_disparity: usize,
    /// Input width of each hourglass (the 32 of the reference layout).
    pub hourglass_width: usize,
    pub hourglass_count: usize,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [8, 16],
            feature_channels: 16,
            groups: 4,
            max_disparity: 8,
            hourglass_width: 32,
            hourglass_count: 3,
        }
    }
}

impl StereoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.feature_channels % self.groups != 0 {
            return arg(format!(
                "N_c = {} is not divisible by N_g = {}",
                self.feature_channels, self.groups
            ));
        }
        if self.max_disparity < 1 {
            return arg("max_disparity must be at least 1");
        }
        if self.hourglass_width == 0 || self.encoder_widths.contains(&0) {
            return arg("layer widths must be positive");
        }
        Ok(())
    }
}

/// Left and right feature maps produced by the same encoder weights.
#[derive(Clone, Debug)]
pub struct UnaryFeatures {
    pub left: Tensor,
    pub right: Tensor,
}

/// Pre-softmax matching scores, `D_max × H_f × W_f`.
#[derive(Clone, Debug)]
pub struct StereoVolume {
    pub data: Tensor,
}

pub fn init_encoder<R: Rng>(p: &mut ParamStore, prefix: &str, cfg: &StereoConfig, rng: &mut R) {
    let [w1, w2] = cfg.encoder_widths;
    p.init_conv(&format!("{prefix}.enc1"), w1, 1, [1, 3, 3], rng);
    p.init_conv(&format!("{prefix}.enc2"), w2, w1, [1, 3, 3], rng);
    p.init_conv(&format!("{prefix}.enc3"), cfg.feature_channels, w2, [1, 3, 3], rng);
}

pub fn init_hourglass<R: Rng>(p: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) {
    let (w1, w2, w4) = (width, 2 * width, 4 * width);
    let k3 = [3, 3, 3];
    p.init_conv(&format!("{prefix}.conv1"), w2, w1, k3, rng);
    p.init_conv(&format!("{prefix}.conv2"), w2, w2, k3, rng);
    p.init_conv(&format!("{prefix}.conv3"), w4, w2, k3, rng);
    p.init_conv(&format!("{prefix}.conv4"), w4, w4, k3, rng);
    p.init_deconv(&format!("{prefix}.deconv5"), w4, w2, k3, 2, rng);
    p.init_conv(&format!("{prefix}.conv6"), w2, w2, [1, 1, 1], rng);
    p.init_deconv(&format!("{prefix}.deconv7"), w2, w1, k3, 2, rng);
    p.init_conv(&format!("{prefix}.conv8"), w1, w1, [1, 1, 1], rng);
}

pub fn init_params<R: Rng>(p: &mut ParamStore, cfg: &StereoConfig, rng: &mut R) {
    init_encoder(p, "stereo", cfg, rng);
    let w = cfg.hourglass_width;
    p.init_conv("stereo.pre1", w, 1, [3, 3, 3], rng);
    p.init_conv("stereo.pre2", w, w, [3, 3, 3], rng);
    for i in 0..cfg.hourglass_count {
        init_hourglass(p, &format!("stereo.hg{i}"), w, rng);
    }
    p.init_conv("stereo.post1", w, w, [3, 3, 3], rng);
    p.init_conv("stereo.post2", 1, w, [3, 3, 3], rng);
}

/// Encode one `1×H×W` image into `N_c × H/4 × W/4` features.
pub fn encode(tape: &mut Tape, p: &Bound, prefix: &str, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 1 {
        return shape(format!("encoder expects a 1×H×W image, got {s:?}"));
    }
    if s[1] % ENCODER_DOWNSCALE != 0 || s[2] % ENCODER_DOWNSCALE != 0 {
        return arg(format!(
            "image extents {}×{} are not divisible by {ENCODER_DOWNSCALE}",
            s[1], s[2]
        ));
    }
    let x = tape.reshape(image, &[1, 1, s[1], s[2]])?;
    let x = nn::conv2(tape, p, &format!("{prefix}.enc1"), x, 2, 1, 1)?;
    let x = tape.relu(x);
    let x = nn::conv2(tape, p, &format!("{prefix}.enc2"), x, 2, 1, 1)?;
    let x = tape.relu(x);
    let x = nn::conv2(tape, p, &format!("{prefix}.enc3"), x, 1, 1, 1)?;
    let fs = tape.shape(x).to_vec();
    tape.reshape(x, &[fs[0], fs[2], fs[3]])
}

/// Run the shared encoder over both views.
pub fn extract_unary_taped(
    tape: &mut Tape,
    p: &Bound,
    left: Var,
    right: Var,
) -> Result<(Var, Var)> {
    if tape.shape(left) != tape.shape(right) {
        return shape(format!(
            "stereo pair extents differ: {:?} vs {:?}",
            tape.shape(left),
            tape.shape(right)
        ));
    }
    let fl = encode(tape, p, "stereo", left)?;
    let fr = encode(tape, p, "stereo", right)?;
    Ok((fl, fr))
}

pub fn extract_unary(left: &Tensor, right: &Tensor, weights: &ParamStore) -> Result<UnaryFeatures> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let l = tape.constant(left.clone());
    let r = tape.constant(right.clone());
    let (fl, fr) = extract_unary_taped(&mut tape, &p, l, r)?;
    Ok(UnaryFeatures {
        left: tape.value(fl).clone(),
        right: tape.value(fr).clone(),
    })
}

/// Group-wise correlation volume `N_g × (max_disparity + 1) × H × W`.
pub fn gwc_correlation(features: &UnaryFeatures, groups: usize, max_disparity: usize) -> Result<Tensor> {
    crate::ops::group_correlation(&features.left, &features.right, groups, max_disparity)
}

/// Interpolation table from integer-disparity slices to depth-bin slices.
///
/// Each bin center `z` samples disparity `f_u·b/z`, clamped to
/// `[0, max_disparity]`, linearly between its neighbouring slices.
pub fn depth_resampler(
    n_disp: usize,
    h: usize,
    w: usize,
    bins: &DepthBins,
    rig: &CameraRig,
) -> Result<Resampler> {
    let max_d = (n_disp - 1) as f64;
    let mut taps = Vec::with_capacity(bins.count * h * w);
    for zi in 0..bins.count {
        let d = (rig.left.fu * rig.baseline / bins.center(zi)).clamp(0.0, max_d);
        let lo = (d.floor() as usize).min(n_disp - 1);
        let frac = d - lo as f64;
        for y in 0..h {
            for x in 0..w {
                let at = |k: usize| (k * h + y) * w + x;
                let mut row = vec![(at(lo), 1.0 - frac)];
                if frac > 0.0 {
                    row.push((at(lo + 1), frac));
                }
                taps.push(row);
            }
        }
    }
    Resampler::new(&[n_disp, h, w], &[bins.count, h, w], taps)
}

/// Correlation volume `N_g × D_disp × H × W` → depth volume `D_max × H × W`
/// (per-group resampling, then the mean over groups).
pub fn disparity_to_depth_volume_taped(
    tape: &mut Tape,
    cost: Var,
    bins: &DepthBins,
    rig: &CameraRig,
) -> Result<Var> {
    let s = tape.shape(cost).to_vec();
    if s.len() != 4 {
        return shape(format!("cost volume must be N_g×D×H×W, got {s:?}"));
    }
    let r = Arc::new(depth_resampler(s[1], s[2], s[3], bins, rig)?);
    let per_group = tape.resample(cost, &r)?;
    let avg = tape.constant(Tensor::full(&[1, s[0], 1, 1, 1], 1.0 / s[0] as f64));
    let mean = tape.conv(per_group, avg, ConvSpec::cubic(1, 0, 1))?;
    tape.reshape(mean, &[bins.count, s[2], s[3]])
}

pub fn disparity_to_depth_volume(cost: &Tensor, bins: &DepthBins, rig: &CameraRig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(cost.clone());
    let v = disparity_to_depth_volume_taped(&mut tape, c, bins, rig)?;
    Ok(tape.value(v).clone())
}

/// One 3-D hourglass; output shape equals input shape.
pub fn hourglass_taped(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1..].iter().any(|e| e % 4 != 0) {
        return arg(format!("hourglass needs C×D×H×W with D, H, W divisible by 4, got {s:?}"));
    }
    let name = |l: &str| format!("{prefix}.{l}");
    let c1 = nn::conv3(tape, p, &name("conv1"), x, 2, 1, 1)?;
    let c1 = tape.relu(c1);
    let c2 = nn::conv3(tape, p, &name("conv2"), c1, 1, 1, 1)?;
    let c2 = tape.relu(c2);
    let c3 = nn::conv3(tape, p, &name("conv3"), c2, 2, 1, 1)?;
    let c3 = tape.relu(c3);
    let c4 = nn::conv3(tape, p, &name("conv4"), c3, 1, 1, 1)?;
    let c4 = tape.relu(c4);
    let d5 = nn::upsample3(tape, p, &name("deconv5"), c4)?;
    let c6 = nn::conv3(tape, p, &name("conv6"), c2, 1, 0, 1)?;
    let short = tape.add(d5, c6)?;
    let short = tape.relu(short);
    let d7 = nn::upsample3(tape, p, &name("deconv7"), short)?;
    let c8 = nn::conv3(tape, p, &name("conv8"), x, 1, 0, 1)?;
    let out = tape.add(d7, c8)?;
    Ok(tape.relu(out))
}

pub fn hourglass_regularize(x: &Tensor, weights: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = hourglass_taped(&mut tape, &p, prefix, xv)?;
    Ok(tape.value(y).clone())
}

/// Full stereo branch on the tape: images `1×H×W` → `D_max × H/4 × W/4` logits.
///
/// Returns the left features as well; the BEV branch lifts from them.
pub fn build_stereo_volume_taped(
    tape: &mut Tape,
    p: &Bound,
    left: Var,
    right: Var,
    rig: &CameraRig,
    bins: &DepthBins,
    cfg: &StereoConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (fl, fr) = extract_unary_taped(tape, p, left, right)?;
    if tape.shape(fl)[0] != cfg.feature_channels {
        return shape("encoder width disagrees with feature_channels");
    }
    let cost = tape.group_correlation(fl, fr, cfg.groups, cfg.max_disparity)?;
    let feat_rig = rig.downscaled(ENCODER_DOWNSCALE);
    let depth = disparity_to_depth_volume_taped(tape, cost, bins, &feat_rig)?;
    let s = tape.shape(depth).to_vec();
    let mut x = tape.reshape(depth, &[1, s[0], s[1], s[2]])?;
    x = nn::conv3(tape, p, "stereo.pre1", x, 1, 1, 1)?;
    x = tape.relu(x);
    x = nn::conv3(tape, p, "stereo.pre2", x, 1, 1, 1)?;
    x = tape.relu(x);
    for i in 0..cfg.hourglass_count {
        x = hourglass_taped(tape, p, &format!("stereo.hg{i}"), x)?;
    }
    x = nn::conv3(tape, p, "stereo.post1", x, 1, 1, 1)?;
    x = tape.relu(x);
    x = nn::conv3(tape, p, "stereo.post2", x, 1, 1, 1)?;
    let v = tape.reshape(x, &s)?;
    Ok((v, fl))
}

pub fn build_stereo_volume(
    left: &Tensor,
    right: &Tensor,
    rig: &CameraRig,
    bins: &DepthBins,
    cfg: &StereoConfig,
    weights: &ParamStore,
) -> Result<StereoVolume> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let l = tape.constant(left.clone());
    let r = tape.constant(right.clone());
    let (v, _) = build_stereo_volume_taped(&mut tape, &p, l, r, rig, bins, cfg)?;
    Ok(StereoVolume {
        data: tape.value(v).clone(),
    })
}
