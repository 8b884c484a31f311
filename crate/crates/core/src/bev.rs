//! BEV latent volume and context features lifted from the left view.
//!
//! The camera parameters are embedded into a per-channel gate that makes the
//! shared features camera-aware; a context branch and a latent-depth branch
//! (residual blocks + ASPP) then run in parallel.

use crate::camera::{assemble_params, CameraRig, PARAM_LEN};
use crate::error::{arg, shape, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BevConfig {
    /// Width `E` of the parameter embedding.
    pub embed_width: usize,
    /// Context channels `C_b`.
    pub context_channels: usize,
    pub aspp_dilations: Vec<usize>,
    /// Output channels of each ASPP branch.
    pub aspp_width: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            embed_width: 32,
            context_channels: 16,
            aspp_dilations: vec![1, 6, 12],
            aspp_width: 8,
        }
    }
}

/// Latent depth logits plus context features on the same pixel grid.
#[derive(Clone, Debug)]
pub struct BevVolume {
    /// `D_max × H_f × W_f`, pre-softmax.
    pub latent: Tensor,
    /// `C_b × H_f × W_f`.
    pub context: Tensor,
}

pub fn init_params<R: Rng>(
    p: &mut ParamStore,
    cfg: &BevConfig,
    feature_channels: usize,
    depth_bins: usize,
    rng: &mut R,
) {
    let nc = feature_channels;
    p.init_linear("bev.param_fc", cfg.embed_width, PARAM_LEN, rng);
    p.init_conv("bev.param_conv", nc, cfg.embed_width, [1, 1, 1], rng);
    p.init_conv("bev.context", cfg.context_channels, nc, [1, 3, 3], rng);
    for r in 0..2 {
        p.init_conv(&format!("bev.res{r}.conv1"), nc, nc, [1, 3, 3], rng);
        p.init_conv(&format!("bev.res{r}.conv2"), nc, nc, [1, 3, 3], rng);
    }
    for (i, _) in cfg.aspp_dilations.iter().enumerate() {
        p.init_conv(&format!("bev.aspp{i}"), cfg.aspp_width, nc, [1, 3, 3], rng);
    }
    p.init_conv("bev.aspp_point", cfg.aspp_width, nc, [1, 1, 1], rng);
    let branches = cfg.aspp_dilations.len() + 1;
    p.init_conv("bev.aspp_fuse", depth_bins, branches * cfg.aspp_width, [1, 1, 1], rng);
}

/// `P_e = σ(Conv(Reshape(FC(P_i))))`.
pub fn encode_params_taped(tape: &mut Tape, p: &Bound, params: Var) -> Result<Var> {
    if tape.shape(params) != [PARAM_LEN] {
        return arg(format!(
            "camera parameter vector must have length {PARAM_LEN}, got {:?}",
            tape.shape(params)
        ));
    }
    let e = nn::linear(tape, p, "bev.param_fc", params)?;
    let width = tape.shape(e)[0];
    let e = tape.reshape(e, &[width, 1, 1, 1])?;
    let c = nn::conv2(tape, p, "bev.param_conv", e, 1, 0, 1)?;
    let n = tape.shape(c)[0];
    let c = tape.reshape(c, &[n])?;
    Ok(tape.sigmoid(c))
}

pub fn encode_params(params: &[f64], weights: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(&[params.len()], params.to_vec())?);
    let y = encode_params_taped(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

/// `out[c] = P_e[c] · F[c]`.
pub fn camera_aware_features(features: &Tensor, pe: &Tensor) -> Result<Tensor> {
    crate::ops::channel_scale(features, pe)
}

fn planar(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return shape(format!("expected C×H×W features, got {s:?}"));
    }
    tape.reshape(x, &[s[0], 1, s[1], s[2]])
}

fn unplanar(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &[s[0], s[2], s[3]])
}

/// Single 3×3 convolution to `C_b` channels.
pub fn context_branch_taped(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let x = planar(tape, x)?;
    let y = nn::conv2(tape, p, "bev.context", x, 1, 1, 1)?;
    unplanar(tape, y)
}

/// `x + conv(relu(conv(x)))`.
pub fn residual_block_taped(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::conv2(tape, p, &format!("{prefix}.conv1"), x, 1, 1, 1)?;
    let h = tape.relu(h);
    let h = nn::conv2(tape, p, &format!("{prefix}.conv2"), h, 1, 1, 1)?;
    tape.add(x, h)
}

/// One dilated ASPP branch (3×3, padding = dilation) followed by ReLU.
pub fn aspp_branch_taped(tape: &mut Tape, p: &Bound, index: usize, dilation: usize, x: Var) -> Result<Var> {
    let y = nn::conv2(tape, p, &format!("bev.aspp{index}"), x, 1, dilation, dilation)?;
    Ok(tape.relu(y))
}

/// Two residual blocks, then ASPP fused to `D_max` logits.
pub fn latent_branch_taped(tape: &mut Tape, p: &Bound, cfg: &BevConfig, x: Var) -> Result<Var> {
    let mut h = planar(tape, x)?;
    for r in 0..2 {
        h = residual_block_taped(tape, p, &format!("bev.res{r}"), h)?;
    }
    let mut branches = Vec::with_capacity(cfg.aspp_dilations.len() + 1);
    for (i, &d) in cfg.aspp_dilations.iter().enumerate() {
        branches.push(aspp_branch_taped(tape, p, i, d, h)?);
    }
    let pt = nn::conv2(tape, p, "bev.aspp_point", h, 1, 0, 1)?;
    branches.push(tape.relu(pt));
    let cat = tape.concat(&branches)?;
    let y = nn::conv2(tape, p, "bev.aspp_fuse", cat, 1, 0, 1)?;
    unplanar(tape, y)
}

/// Returns `(latent logits, context)`.
pub fn build_bev_volume_taped(
    tape: &mut Tape,
    p: &Bound,
    features: Var,
    rig: &CameraRig,
    cfg: &BevConfig,
) -> Result<(Var, Var)> {
    let params = tape.constant(Tensor::from_vec(assemble_params(rig).to_vec()));
    let pe = encode_params_taped(tape, p, params)?;
    if tape.shape(pe)[0] != tape.shape(features)[0] {
        return shape(format!(
            "parameter gate has {} channels, features have {}",
            tape.shape(pe)[0],
            tape.shape(features)[0]
        ));
    }
    let aware = tape.channel_scale(features, pe)?;
    let latent = latent_branch_taped(tape, p, cfg, aware)?;
    let context = context_branch_taped(tape, p, aware)?;
    Ok((latent, context))
}

pub fn build_bev_volume(
    features: &Tensor,
    rig: &CameraRig,
    cfg: &BevConfig,
    weights: &ParamStore,
) -> Result<BevVolume> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let f = tape.constant(features.clone());
    let (l, c) = build_bev_volume_taped(&mut tape, &p, f, rig, cfg)?;
    Ok(BevVolume {
        latent: tape.value(l).clone(),
        context: tape.value(c).clone(),
    })
}
