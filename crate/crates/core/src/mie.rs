//! Mutual interactive ensemble of the stereo and BEV volumes.
//!
//! Two stages:
//! * bi-directional reliable interaction: linear cross-attention in both
//!   directions, with the BEV-side result gated per pixel by the stereo
//!   winner-takes-all confidence;
//! * dual volume ensemble: residual 3-D convolutions over the concatenated
//!   volumes, squeeze-and-excitation channel recalibration, and a vote across
//!   four dilated convolution groups.
//!
//! Tokens are pixels; each token's feature vector is its depth profile, so an
//! `H×W` confidence map lines up one-to-one with the query tokens.

use crate::error::{arg, shape, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct MieConfig {
    /// Channels `C_f` of the transformed volume.
    pub fuse_channels: usize,
    /// Squeeze-and-excitation reduction ratio `r`.
    pub reduction: usize,
    /// One dilation per voting group.
    pub dilations: Vec<usize>,
    /// Group-norm groups; reduced to a divisor of the channel count it normalizes.
    pub norm_groups: usize,
    /// When false the ensemble is replaced by the plain mean of the two volumes.
    pub enabled: bool,
}

impl Default for MieConfig {
    fn default() -> Self {
        Self {
            fuse_channels: 16,
            reduction: 4,
            dilations: vec![1, 2, 3, 4],
            norm_groups: 4,
            enabled: true,
        }
    }
}

impl MieConfig {
    pub fn validate(&self) -> Result<()> {
        let g = self.dilations.len();
        if g == 0 || self.fuse_channels % g != 0 {
            return arg(format!(
                "C_f = {} is not divisible into {g} voting groups",
                self.fuse_channels
            ));
        }
        if self.reduction == 0 || self.fuse_channels % self.reduction != 0 {
            return arg(format!(
                "C_f = {} is not divisible by reduction {}",
                self.fuse_channels, self.reduction
            ));
        }
        Ok(())
    }

    fn group_width(&self) -> usize {
        self.fuse_channels / self.dilations.len()
    }
}

pub fn init_params<R: Rng>(p: &mut ParamStore, cfg: &MieConfig, depth_bins: usize, rng: &mut R) {
    let d = depth_bins;
    for name in ["q_s", "k_s", "v_s", "q_b", "k_b", "v_b"] {
        // identity plus a small perturbation
        let mut w = Tensor::uniform(&[d, d], 0.1, rng);
        for i in 0..d {
            w.set(&[i, i], w.at(&[i, i]) + 1.0);
        }
        p.insert(format!("mie.{name}"), w);
    }
    let cf = cfg.fuse_channels;
    p.init_conv("mie.in", cf, 2, [3, 3, 3], rng);
    p.init_conv("mie.res", cf, cf, [3, 3, 3], rng);
    let hidden = cf / cfg.reduction;
    p.insert("mie.se1", Tensor::uniform(&[hidden, cf], (3.0 / cf as f64).sqrt(), rng));
    p.insert("mie.se2", Tensor::uniform(&[cf, hidden], (3.0 / hidden as f64).sqrt(), rng));
    let gw = cfg.group_width();
    for i in 0..cfg.dilations.len() {
        p.init_conv(&format!("mie.vote{i}"), gw, gw, [3, 3, 3], rng);
    }
    p.init_conv("mie.point", 1, cf, [1, 1, 1], rng);
    p.insert("mie.norm.gamma", Tensor::ones(&[1]));
    p.insert("mie.norm.beta", Tensor::zeros(&[1]));
}

/// `D×H×W` volume → `(H·W) × D` token matrix.
pub fn tokenize(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return shape(format!("tokenize expects D×H×W, got {s:?}"));
    }
    let flat = tape.reshape(v, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Inverse of [`tokenize`].
pub fn detokenize(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(t).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return shape(format!("detokenize: {s:?} is not ({h}·{w})×D"));
    }
    let dt = tape.transpose(t)?;
    tape.reshape(dt, &[s[1], h, w])
}

/// Global context `φ_k(K)ᵀ·V`, `d × d`.
fn global_context(tape: &mut Tape, k: Var, v: Var) -> Result<Var> {
    let pk = tape.softmax(k, 0)?;
    let pkt = tape.transpose(pk)?;
    tape.matmul(pkt, v)
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<()> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return shape("attention operands must be matrices");
    }
    if qs[1] != ks[1] || ks != vs {
        return shape(format!("attention widths disagree: Q {qs:?}, K {ks:?}, V {vs:?}"));
    }
    Ok(())
}

/// `φ_q(Q)·(φ_k(K)ᵀ·V)` with row-softmax `φ_q` and column-softmax `φ_k`;
/// the `N × M` token affinity is never formed.
pub fn linear_cross_attention_taped(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_qkv(tape, q, k, v)?;
    let g = global_context(tape, k, v)?;
    let pq = tape.softmax(q, 1)?;
    tape.matmul(pq, g)
}

/// Cross-attention with each query token's output scaled by its confidence.
pub fn filtered_cross_attention_taped(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    confidence: Var,
) -> Result<Var> {
    let n = tape.shape(q)[0];
    let c = tape.value(confidence).len();
    if c != n {
        return shape(format!("confidence has {c} entries for {n} query tokens"));
    }
    let c = tape.reshape(confidence, &[n])?;
    let out = linear_cross_attention_taped(tape, q, k, v)?;
    tape.channel_scale(out, c)
}

/// Per-pixel maximum of the depth softmax, `H×W`.
pub fn wta_confidence_taped(tape: &mut Tape, volume: Var) -> Result<Var> {
    if tape.shape(volume).len() != 3 {
        return shape("confidence needs a D×H×W volume");
    }
    let p = tape.softmax(volume, 0)?;
    tape.max_along(p, 0)
}

fn run<F>(inputs: &[&Tensor], f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn linear_cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    run(&[q, k, v], |t, x| linear_cross_attention_taped(t, x[0], x[1], x[2]))
}

pub fn filtered_cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, c: &Tensor) -> Result<Tensor> {
    run(&[q, k, v, c], |t, x| {
        filtered_cross_attention_taped(t, x[0], x[1], x[2], x[3])
    })
}

pub fn wta_confidence(volume: &Tensor) -> Result<Tensor> {
    run(&[volume], |t, x| wta_confidence_taped(t, x[0]))
}

/// Interacted volumes `(V_stereo', V_bev')` and the stereo confidence map.
pub struct Interaction {
    pub stereo: Var,
    pub bev: Var,
    pub confidence: Var,
}

pub fn bri_exchange_taped(tape: &mut Tape, p: &Bound, stereo: Var, bev: Var) -> Result<Interaction> {
    let s = tape.shape(stereo).to_vec();
    if s.len() != 3 || tape.shape(bev) != s.as_slice() {
        return shape(format!(
            "volumes must share a D×H×W shape: {:?} vs {:?}",
            s,
            tape.shape(bev)
        ));
    }
    let (h, w) = (s[1], s[2]);
    let ts = tokenize(tape, stereo)?;
    let tb = tokenize(tape, bev)?;
    let proj = |tape: &mut Tape, t: Var, name: &str| -> Result<Var> {
        let w = p.var(&format!("mie.{name}"))?;
        tape.matmul(t, w)
    };
    let (q_s, k_s, v_s) = (proj(tape, ts, "q_s")?, proj(tape, ts, "k_s")?, proj(tape, ts, "v_s")?);
    let (q_b, k_b, v_b) = (proj(tape, tb, "q_b")?, proj(tape, tb, "k_b")?, proj(tape, tb, "v_b")?);
    let confidence = wta_confidence_taped(tape, stereo)?;
    let bev_t = filtered_cross_attention_taped(tape, q_s, k_b, v_b, confidence)?;
    let stereo_t = linear_cross_attention_taped(tape, q_b, k_s, v_s)?;
    Ok(Interaction {
        stereo: detokenize(tape, stereo_t, h, w)?,
        bev: detokenize(tape, bev_t, h, w)?,
        confidence,
    })
}

/// `σ(W₂·gelu(W₁·pool(V_f)))` applied per channel.
pub fn channel_recalibrate_taped(tape: &mut Tape, vf: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = tape.shape(vf)[0];
    let (s1, s2) = (tape.shape(w1).to_vec(), tape.shape(w2).to_vec());
    if s1.len() != 2 || s1[1] != c || s2 != [c, s1[0]] {
        return shape(format!("excitation weights {s1:?}, {s2:?} for {c} channels"));
    }
    if c % s1[0] != 0 {
        return arg(format!("reduced width {} does not divide {c}", s1[0]));
    }
    let z = tape.global_avg_pool(vf)?;
    let z = tape.reshape(z, &[c, 1])?;
    let h = tape.matmul(w1, z)?;
    let h = tape.gelu(h);
    let g = tape.matmul(w2, h)?;
    let g = tape.reshape(g, &[c])?;
    let g = tape.sigmoid(g);
    tape.channel_scale(vf, g)
}

pub fn channel_recalibrate(vf: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    run(&[vf, w1, w2], |t, x| channel_recalibrate_taped(t, x[0], x[1], x[2]))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One voting group: 3³ atrous convolution with padding equal to its dilation.
pub fn vote_group_taped(tape: &mut Tape, p: &Bound, index: usize, dilation: usize, x: Var) -> Result<Var> {
    nn::conv3(tape, p, &format!("mie.vote{index}"), x, 1, dilation, dilation)
}

/// Split → per-group atrous conv → concat → pointwise conv, GELU, group norm.
/// Output `1×D×H×W`.
pub fn multigroup_vote_taped(tape: &mut Tape, p: &Bound, cfg: &MieConfig, vf: Var) -> Result<Var> {
    cfg.validate()?;
    let c = tape.shape(vf)[0];
    if c != cfg.fuse_channels {
        return shape(format!("vote expects {} channels, got {c}", cfg.fuse_channels));
    }
    let gw = cfg.group_width();
    let parts = tape.split(vf, &vec![gw; cfg.dilations.len()])?;
    let mut voted = Vec::with_capacity(parts.len());
    for (i, (&d, part)) in cfg.dilations.iter().zip(parts).enumerate() {
        voted.push(vote_group_taped(tape, p, i, d, part)?);
    }
    let cat = tape.concat(&voted)?;
    let y = nn::conv3(tape, p, "mie.point", cat, 1, 0, 1)?;
    let y = tape.gelu(y);
    let groups = gcd(cfg.norm_groups, tape.shape(y)[0]);
    let y = tape.group_norm(y, groups, 1e-5)?;
    let y = tape.channel_scale(y, p.var("mie.norm.gamma")?)?;
    tape.add_bias(y, p.var("mie.norm.beta")?)
}

pub fn multigroup_vote(vf: &Tensor, weights: &ParamStore, cfg: &MieConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let x = tape.constant(vf.clone());
    let y = multigroup_vote_taped(&mut tape, &p, cfg, x)?;
    Ok(tape.value(y).clone())
}

/// Ensembled logits `D×H×W` plus the confidence map (absent when disabled).
pub struct Ensemble {
    pub volume: Var,
    pub confidence: Option<Var>,
}

pub fn mie_forward_taped(
    tape: &mut Tape,
    p: &Bound,
    cfg: &MieConfig,
    stereo: Var,
    bev: Var,
) -> Result<Ensemble> {
    let s = tape.shape(stereo).to_vec();
    if !cfg.enabled {
        let sum = tape.add(stereo, bev)?;
        return Ok(Ensemble {
            volume: tape.scale(sum, 0.5),
            confidence: None,
        });
    }
    let inter = bri_exchange_taped(tape, p, stereo, bev)?;
    let cat = tape.concat(&[inter.stereo, inter.bev])?;
    let cat = tape.reshape(cat, &[2, s[0], s[1], s[2]])?;
    let h = nn::conv3(tape, p, "mie.in", cat, 1, 1, 1)?;
    let h = tape.relu(h);
    let r = nn::conv3(tape, p, "mie.res", h, 1, 1, 1)?;
    let vf = tape.add(h, r)?;
    let vf = channel_recalibrate_taped(tape, vf, p.var("mie.se1")?, p.var("mie.se2")?)?;
    let ens = multigroup_vote_taped(tape, p, cfg, vf)?;
    Ok(Ensemble {
        volume: tape.reshape(ens, &s)?,
        confidence: Some(inter.confidence),
    })
}

pub fn mie_forward(stereo: &Tensor, bev: &Tensor, weights: &ParamStore, cfg: &MieConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind_frozen(&mut tape);
    let s = tape.constant(stereo.clone());
    let b = tape.constant(bev.clone());
    let e = mie_forward_taped(&mut tape, &p, cfg, s, b)?;
    Ok(tape.value(e.volume).clone())
}
