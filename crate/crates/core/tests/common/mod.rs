//! Shared fixtures for the integration suites: a toy-scale model
//! configuration, direct-loop oracles and the per-operation gradient cases.

#![allow(dead_code)]

use dualvol_core::bev::BevConfig;
use dualvol_core::camera::{CameraIntrinsics, CameraRig, DepthBins};
use dualvol_core::mie::{self, MieConfig};
use dualvol_core::model::{Model, ModelConfig, TrainSample};
use dualvol_core::ops::ConvSpec;
use dualvol_core::scene::{desk_extrinsics, random_spec, render_scene};
use dualvol_core::ssc::{self, DepthTarget, SscConfig};
use dualvol_core::stereo::StereoConfig;
use dualvol_core::tape::{Resampler, Tape, Var};
use dualvol_core::tensor::Tensor;
use dualvol_core::voxel::{GridSpec, VoxelGrid};
use dualvol_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform values with magnitude in `[0.2, 1]`, kept clear of the kinks of
/// relu, clamp and max.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Model small enough for exhaustive finite differences: 16×16 images,
/// 4 depth bins, a 4×4×4 grid and two semantic classes.
pub fn toy_config() -> ModelConfig {
    let grid = GridSpec::new([4, 4, 4], 2.0).unwrap();
    let intr = CameraIntrinsics::new(12.0, 12.0, 7.5, 7.5).unwrap();
    ModelConfig {
        image: [16, 16],
        rig: CameraRig::symmetric(intr, 1.0, desk_extrinsics(&grid)).unwrap(),
        bins: DepthBins::new(2.0, 10.0, 4).unwrap(),
        grid,
        classes: 3,
        stereo: StereoConfig {
            encoder_widths: [2, 4],
            feature_channels: 4,
            groups: 2,
            max_disparity: 2,
            hourglass_width: 4,
            hourglass_count: 1,
        },
        bev: BevConfig {
            embed_width: 4,
            context_channels: 2,
            aspp_dilations: vec![1, 2],
            aspp_width: 2,
        },
        mie: MieConfig {
            fuse_channels: 4,
            reduction: 2,
            dilations: vec![1, 2],
            norm_groups: 2,
            enabled: true,
        },
        ssc: SscConfig {
            unet_width: 2,
            classes: 3,
        },
        ..ModelConfig::desk()
    }
}

/// A rendered training sample for `cfg`.
pub fn sample_for(cfg: &ModelConfig, seed: u64) -> TrainSample {
    let spec = random_spec(seed, cfg.rig, cfg.image, cfg.grid, cfg.classes, cfg.bins).unwrap();
    let s = render_scene(&spec, seed).unwrap();
    TrainSample::from_scene(&s, cfg).unwrap()
}

/// Direct seven-loop 3-D convolution `y[o,z,y,x] = Σ k[o,c,·]·x[c, s·p − pad + dil·k]`.
pub fn naive_conv(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Tensor {
    let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kd, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]];
    let ext = [d, h, w];
    let kern = [kd, kh, kw];
    let out: Vec<usize> = (0..3)
        .map(|a| (ext[a] + 2 * spec.pad[a] - spec.dilation[a] * (kern[a] - 1) - 1) / spec.stride[a] + 1)
        .collect();
    let mut y = Tensor::zeros(&[o, out[0], out[1], out[2]]);
    for oc in 0..o {
        for pz in 0..out[0] {
            for py in 0..out[1] {
                for px in 0..out[2] {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let iz = (pz * spec.stride[0] + a * spec.dilation[0]) as isize - spec.pad[0] as isize;
                                    let iy = (py * spec.stride[1] + b * spec.dilation[1]) as isize - spec.pad[1] as isize;
                                    let ix = (px * spec.stride[2] + e * spec.dilation[2]) as isize - spec.pad[2] as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += k.at(&[oc, ic, a, b, e]) * x.at(&[ic, iz as usize, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    y.set(&[oc, pz, py, px], s);
                }
            }
        }
    }
    y
}

/// Transposed convolution by scattering each input through the kernel.
pub fn naive_conv_transpose(x: &Tensor, k: &Tensor, spec: ConvSpec, output_padding: [usize; 3]) -> Tensor {
    let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [_, o, kd, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3], k.shape()[4]];
    let ext = [d, h, w];
    let kern = [kd, kh, kw];
    let out: Vec<usize> = (0..3)
        .map(|a| {
            (ext[a] - 1) * spec.stride[a] + spec.dilation[a] * (kern[a] - 1) + 1 + output_padding[a] - 2 * spec.pad[a]
        })
        .collect();
    let mut y = Tensor::zeros(&[o, out[0], out[1], out[2]]);
    for ic in 0..c {
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x.at(&[ic, z, yy, xx]);
                    for oc in 0..o {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let oz = (z * spec.stride[0] + a * spec.dilation[0]) as isize - spec.pad[0] as isize;
                                    let oy = (yy * spec.stride[1] + b * spec.dilation[1]) as isize - spec.pad[1] as isize;
                                    let ox = (xx * spec.stride[2] + e * spec.dilation[2]) as isize - spec.pad[2] as isize;
                                    if oz < 0 || oy < 0 || ox < 0 || oz >= out[0] as isize || oy >= out[1] as isize || ox >= out[2] as isize {
                                        continue;
                                    }
                                    let idx = [oc, oz as usize, oy as usize, ox as usize];
                                    y.set(&idx, y.at(&idx) + v * k.at(&[ic, oc, a, b, e]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Random voxel grid with a few invalid voxels and every class present.
pub fn random_grid(dims: [usize; 3], classes: usize, rng: &mut ChaCha8Rng) -> VoxelGrid {
    let mut g = VoxelGrid::new(dims, classes);
    for (i, l) in g.labels.iter_mut().enumerate() {
        *l = if i < classes { i as u16 } else { rng.gen_range(0..classes as u16) };
    }
    for i in 0..g.len() {
        if i >= classes && rng.gen_bool(0.1) {
            g.invalid[i] = true;
            g.labels[i] = 0;
        }
    }
    g
}

type GradFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub f: GradFn,
    pub inputs: Vec<Tensor>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        f: Box::new(f),
        inputs,
    }
}

/// Reduce a tensor-valued output to a scalar with fixed pseudo-random
/// weights, so every output coordinate contributes a distinct sensitivity.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(t.shape(y), 1.0, &mut rng(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// One case per differentiable tape operation, plus the composite building
/// blocks of the pipeline and each loss term.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    let a = uniform(&[3, 4], &mut r);
    let b = uniform(&[3, 4], &mut r);
    out.push(case("add", vec![a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    }));
    out.push(case("sub", vec![a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 2)
    }));
    out.push(case("mul", vec![a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 3)
    }));
    out.push(case("div", vec![a.clone(), away_from_zero(&[3, 4], &mut r)], |t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, 4)
    }));
    out.push(case("scale", vec![a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 5)
    }));
    out.push(case("add_scalar", vec![a.clone()], |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        let y = t.mul(y, y)?;
        project(t, y, 6)
    }));
    out.push(case("one_minus", vec![a.clone()], |t, v| {
        let y = t.one_minus(v[0]);
        let y = t.mul(y, y)?;
        project(t, y, 7)
    }));
    out.push(case("relu", vec![away_from_zero(&[3, 4], &mut r)], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 8)
    }));
    out.push(case("gelu", vec![uniform(&[3, 4], &mut r).map(|x| 3.0 * x)], |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 9)
    }));
    out.push(case("sigmoid", vec![uniform(&[3, 4], &mut r).map(|x| 4.0 * x)], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 10)
    }));
    out.push(case("ln", vec![uniform(&[3, 4], &mut r).map(|x| 1.5 + x)], |t, v| {
        let y = t.ln(v[0]);
        project(t, y, 11)
    }));
    out.push(case("clamp", vec![away_from_zero(&[3, 4], &mut r)], |t, v| {
        // Bounds at ±0.5 sit between samples drawn from ±[0.2, 1].
        let y = t.clamp(v[0], -0.5, 0.5 + 1e-3);
        let y = t.mul(y, v[0])?;
        project(t, y, 12)
    }));
    out.push(case("sum_mean", vec![a.clone()], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let s = t.sum(sq);
        let m = t.mean(v[0]);
        let m = t.mul(m, s)?;
        t.add(s, m)
    }));
    out.push(case("reshape_transpose", vec![a.clone()], |t, v| {
        let y = t.transpose(v[0])?;
        let y = t.reshape(y, &[2, 6])?;
        let y = t.mul(y, y)?;
        project(t, y, 13)
    }));
    out.push(case(
        "matmul",
        vec![uniform(&[3, 5], &mut r), uniform(&[5, 2], &mut r)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 14)
        },
    ));
    out.push(case("softmax", vec![uniform(&[3, 2, 4], &mut r).map(|x| 2.0 * x)], |t, v| {
        let y0 = t.softmax(v[0], 0)?;
        let y1 = t.softmax(v[0], 1)?;
        let y2 = t.softmax(v[0], 2)?;
        let y = t.mul(y0, y1)?;
        let y = t.mul(y, y2)?;
        project(t, y, 15)
    }));
    out.push(case("max_along", vec![distinct(&[4, 3, 2], &mut r)], |t, v| {
        let y = t.max_along(v[0], 0)?;
        let z = t.max_along(v[0], 2)?;
        let y = t.mul(y, y)?;
        let a = project(t, y, 16)?;
        let b = project(t, z, 17)?;
        t.add(a, b)
    }));
    out.push(case(
        "conv_strided_dilated",
        vec![uniform(&[2, 5, 6, 5], &mut r), uniform(&[3, 2, 3, 3, 3], &mut r)],
        |t, v| {
            let a = t.conv(v[0], v[1], ConvSpec::cubic(2, 1, 1))?;
            let b = t.conv(v[0], v[1], ConvSpec::cubic(1, 2, 2))?;
            let pa = project(t, a, 18)?;
            let pb = project(t, b, 19)?;
            t.add(pa, pb)
        },
    ));
    out.push(case(
        "conv_planar",
        vec![uniform(&[2, 1, 7, 6], &mut r), uniform(&[3, 2, 1, 3, 3], &mut r)],
        |t, v| {
            let y = t.conv(v[0], v[1], ConvSpec::planar(2, 1, 1))?;
            project(t, y, 20)
        },
    ));
    out.push(case(
        "conv_transpose",
        vec![uniform(&[2, 2, 3, 2], &mut r), uniform(&[2, 3, 3, 3, 3], &mut r)],
        |t, v| {
            let y = t.conv_transpose(v[0], v[1], ConvSpec::cubic(2, 1, 1), [1, 0, 1])?;
            project(t, y, 21)
        },
    ));
    out.push(case(
        "add_bias_channel_scale",
        vec![uniform(&[3, 2, 2], &mut r), uniform(&[3], &mut r), uniform(&[3], &mut r)],
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.channel_scale(y, v[2])?;
            let y = t.mul(y, y)?;
            project(t, y, 22)
        },
    ));
    out.push(case("global_avg_pool", vec![uniform(&[3, 2, 2, 2], &mut r)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let y = t.global_avg_pool(sq)?;
        project(t, y, 23)
    }));
    out.push(case(
        "concat_split_narrow",
        vec![uniform(&[2, 3], &mut r), uniform(&[3, 3], &mut r)],
        |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let parts = t.split(c, &[1, 3, 1])?;
            let n = t.narrow(c, 1, 2)?;
            let a = t.mul(parts[1], parts[1])?;
            let pa = project(t, a, 24)?;
            let pn = project(t, n, 25)?;
            let pz = project(t, parts[2], 26)?;
            let s = t.add(pa, pn)?;
            t.add(s, pz)
        },
    ));
    out.push(case("group_norm", vec![uniform(&[4, 2, 3], &mut r)], |t, v| {
        let y = t.group_norm(v[0], 2, 1e-5)?;
        project(t, y, 27)
    }));
    out.push(case(
        "outer",
        vec![uniform(&[2, 3, 2], &mut r), uniform(&[4, 3, 2], &mut r)],
        |t, v| {
            let y = t.outer(v[0], v[1])?;
            project(t, y, 28)
        },
    ));
    let rs = Arc::new(random_resampler(&mut r));
    out.push(case("resample", vec![uniform(&[2, 3, 4], &mut r)], move |t, v| {
        let y = t.resample(v[0], &rs)?;
        let y = t.mul(y, y)?;
        project(t, y, 29)
    }));
    out.push(case(
        "group_correlation",
        vec![uniform(&[4, 3, 6], &mut r), uniform(&[4, 3, 6], &mut r)],
        |t, v| {
            let y = t.group_correlation(v[0], v[1], 2, 3)?;
            let y = t.mul(y, y)?;
            project(t, y, 30)
        },
    ));
    out.push(case(
        "filtered_cross_attention",
        vec![
            uniform(&[5, 4], &mut r),
            uniform(&[6, 4], &mut r),
            uniform(&[6, 4], &mut r),
            uniform(&[5], &mut r),
        ],
        |t, v| {
            let y = mie::filtered_cross_attention_taped(t, v[0], v[1], v[2], v[3])?;
            project(t, y, 31)
        },
    ));
    out.push(case("wta_confidence", vec![distinct(&[4, 2, 3], &mut r)], |t, v| {
        let y = mie::wta_confidence_taped(t, v[0])?;
        project(t, y, 32)
    }));
    out.push(case(
        "channel_recalibrate",
        vec![uniform(&[4, 2, 2, 2], &mut r), uniform(&[2, 4], &mut r), uniform(&[4, 2], &mut r)],
        |t, v| {
            let y = mie::channel_recalibrate_taped(t, v[0], v[1], v[2])?;
            project(t, y, 33)
        },
    ));
    out.push(case(
        "lift",
        vec![uniform(&[2, 3, 2], &mut r), uniform(&[4, 3, 2], &mut r)],
        |t, v| {
            let y = ssc::lift_taped(t, v[0], v[1])?;
            project(t, y, 34)
        },
    ));
    let bins = DepthBins::new(2.0, 10.0, 4).unwrap();
    let target = DepthTarget::from_depths(&[Some(2.5), None, Some(9.0), Some(5.1), Some(7.2), None], 2, 3, &bins).unwrap();
    out.push(case("depth_loss", vec![uniform(&[4, 2, 3], &mut r)], move |t, v| {
        Ok(ssc::depth_loss_taped(t, v[0], &target)?.value)
    }));
    let gt = random_grid([2, 3, 2], 3, &mut r);
    let weights = ssc::class_weights(&[&gt], 3);
    let gt2 = gt.clone();
    out.push(case("class_weighted_ce", vec![uniform(&[3, 2, 3, 2], &mut r)], move |t, v| {
        Ok(ssc::class_weighted_ce_taped(t, v[0], &gt, &weights)?.value)
    }));
    out.push(case("sem_geo_losses", vec![uniform(&[3, 2, 3, 2], &mut r)], move |t, v| {
        let (s, g) = ssc::sem_geo_losses_taped(t, v[0], &gt2)?;
        t.add(s.value, g.value)
    }));
    out
}

/// Values whose pairwise gaps exceed the finite-difference step, so the
/// argmax of every slice is stable under perturbation.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - n as f64 * 0.15).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

fn random_resampler(rng: &mut ChaCha8Rng) -> Resampler {
    let taps = (0..5)
        .map(|_| (0..3).map(|_| (rng.gen_range(0..12), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    Resampler::new(&[3, 4], &[5], taps).unwrap()
}

/// Finite-difference check of the full training loss with respect to every
/// `stride`-th parameter coordinate of a toy model.
pub fn pipeline_gradient_error(cfg: &ModelConfig, sample: &TrainSample, stride: usize, step: f64) -> Result<(f64, usize)> {
    let model = Model::new(cfg.clone())?;
    let weights = ssc::class_weights(&[&sample.grid], cfg.classes);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (total, _, _) = model.loss_taped(&mut tape, &bound, sample, &weights)?;
    tape.backward(total)?;
    let analytic: Vec<(String, Tensor)> = bound
        .iter()
        .map(|(n, v)| {
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (n.to_string(), g)
        })
        .collect();
    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let b = m.params.bind_frozen(&mut t);
        let (l, _, _) = m.loss_taped(&mut t, &b, sample, &weights)?;
        Ok(t.value(l).item())
    };
    let mut probe = Model::new(cfg.clone())?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut counter = 0usize;
    for (name, g) in &analytic {
        for i in 0..g.len() {
            counter += 1;
            if counter % stride != 0 {
                continue;
            }
            let orig = probe.params.get(name).unwrap().data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(dualvol_core::gradcheck::relative_error(g.data()[i], numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}
