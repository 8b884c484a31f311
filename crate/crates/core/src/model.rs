//! The assembled pipeline: configuration, forward pass, loss and training.

use crate::bev::{self, BevConfig};
use crate::camera::{CameraIntrinsics, CameraRig, DepthBins};
use crate::config::KvConfig;
use crate::error::{arg, Error, Result};
use crate::mie::{self, MieConfig};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::{Bound, ParamStore};
use crate::scene::{desk_extrinsics, SceneSample};
use crate::ssc::{self, DepthTarget, LossParts, LossVars, LossWeights, SscConfig};
use crate::stereo::{self, StereoConfig, ENCODER_DOWNSCALE};
use crate::tape::{Resampler, Tape, Var};
use crate::tensor::Tensor;
use crate::voxel::{GridSpec, VoxelGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `[height, width]` of the input images.
    pub image: [usize; 2],
    pub rig: CameraRig,
    pub bins: DepthBins,
    pub grid: GridSpec,
    /// `M + 1`.
    pub classes: usize,
    pub stereo: StereoConfig,
    pub bev: BevConfig,
    pub mie: MieConfig,
    pub ssc: SscConfig,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// 64×64 images, 16×16 features, 8 depth bins, a 16×16×8 grid of
    /// 0.5 m voxels and four semantic classes.
    pub fn desk() -> Self {
        let grid = GridSpec::new([16, 16, 8], 0.5).expect("valid grid");
        let intr = CameraIntrinsics::new(48.0, 48.0, 31.5, 31.5).expect("valid intrinsics");
        Self {
            image: [64, 64],
            rig: CameraRig::symmetric(intr, 1.0, desk_extrinsics(&grid)).expect("valid rig"),
            bins: DepthBins::new(2.0, 10.0, 8).expect("valid bins"),
            grid,
            classes: 5,
            stereo: StereoConfig {
                hourglass_width: 8,
                hourglass_count: 1,
                ..Default::default()
            },
            bev: BevConfig::default(),
            mie: MieConfig::default(),
            ssc: SscConfig::default(),
            loss: LossWeights::default(),
            optim: AdamWConfig {
                lr: 3e-3,
                schedule: Schedule::Linear,
                ..Default::default()
            },
            seed: 0,
        }
    }

    pub fn feature_dims(&self) -> [usize; 2] {
        self.image.map(|e| e / ENCODER_DOWNSCALE)
    }

    pub fn validate(&self) -> Result<()> {
        self.stereo.validate()?;
        self.mie.validate()?;
        self.loss.validate()?;
        if self.image.iter().any(|e| e % (4 * ENCODER_DOWNSCALE) != 0) {
            return arg(format!(
                "image extents {:?} must be multiples of {}",
                self.image,
                4 * ENCODER_DOWNSCALE
            ));
        }
        if self.bins.count % 4 != 0 {
            return arg(format!("depth bins {} must be a multiple of 4", self.bins.count));
        }
        if self.grid.dims.iter().any(|d| d % 4 != 0) {
            return arg(format!("grid extents {:?} must be multiples of 4", self.grid.dims));
        }
        if self.classes < 2 {
            return arg("at least one semantic class is needed");
        }
        if self.ssc.classes != self.classes {
            return arg(format!(
                "head predicts {} classes, grid has {}",
                self.ssc.classes, self.classes
            ));
        }
        Ok(())
    }

    /// Read from `key = value` text; absent keys keep their desk defaults.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let mut c = Self::desk();
        if let Some(v) = cfg.list::<usize>("image.size")? {
            c.image = pair(&v, "image.size")?;
        }
        if let Some(v) = cfg.list::<usize>("volume.grid")? {
            c.grid.dims = v
                .try_into()
                .map_err(|_| Error::Config("volume.grid needs three extents".into()))?;
        }
        c.grid = GridSpec::new(c.grid.dims, cfg.get_or("volume.voxel_size", c.grid.voxel_size)?)?;
        c.bins = DepthBins::new(
            cfg.get_or("volume.d_min", c.bins.d_min)?,
            cfg.get_or("volume.d_max", c.bins.d_max)?,
            cfg.get_or("volume.depth_bins", c.bins.count)?,
        )?;
        c.classes = cfg.get_or("volume.classes", c.classes)?;
        c.ssc.classes = c.classes;
        if cfg.contains("camera.fu") {
            let rig = CameraRig::from_config(cfg, "camera")?;
            c.rig = if cfg.contains("camera.extrinsics") {
                rig
            } else {
                CameraRig::symmetric(rig.left, rig.baseline, desk_extrinsics(&c.grid))?
            };
        } else {
            c.rig = CameraRig::symmetric(c.rig.left, c.rig.baseline, desk_extrinsics(&c.grid))?;
        }

        let s = &mut c.stereo;
        if let Some(v) = cfg.list::<usize>("stereo.encoder_widths")? {
            s.encoder_widths = pair(&v, "stereo.encoder_widths")?;
        }
        s.feature_channels = cfg.get_or("stereo.feature_channels", s.feature_channels)?;
        s.groups = cfg.get_or("stereo.groups", s.groups)?;
        s.max_disparity = cfg.get_or("stereo.max_disparity", s.max_disparity)?;
        s.hourglass_width = cfg.get_or("stereo.hourglass_width", s.hourglass_width)?;
        s.hourglass_count = cfg.get_or("stereo.hourglass_count", s.hourglass_count)?;

        let b = &mut c.bev;
        b.embed_width = cfg.get_or("bev.embed_width", b.embed_width)?;
        b.context_channels = cfg.get_or("bev.context_channels", b.context_channels)?;
        if let Some(v) = cfg.list("bev.aspp_dilations")? {
            b.aspp_dilations = v;
        }
        b.aspp_width = cfg.get_or("bev.aspp_width", b.aspp_width)?;

        let m = &mut c.mie;
        m.fuse_channels = cfg.get_or("mie.fuse_channels", m.fuse_channels)?;
        m.reduction = cfg.get_or("mie.reduction", m.reduction)?;
        if let Some(v) = cfg.list("mie.dilations")? {
            m.dilations = v;
        }
        m.norm_groups = cfg.get_or("mie.norm_groups", m.norm_groups)?;
        m.enabled = cfg.get_or("mie.enabled", m.enabled)?;

        c.ssc.unet_width = cfg.get_or("ssc.unet_width", c.ssc.unet_width)?;

        c.loss = LossWeights {
            ce: cfg.get_or("loss.lambda_ce", c.loss.ce)?,
            sem: cfg.get_or("loss.lambda_sem", c.loss.sem)?,
            geo: cfg.get_or("loss.lambda_geo", c.loss.geo)?,
        };
        let o = &mut c.optim;
        o.lr = cfg.get_or("optim.lr", o.lr)?;
        o.beta1 = cfg.get_or("optim.beta1", o.beta1)?;
        o.beta2 = cfg.get_or("optim.beta2", o.beta2)?;
        o.eps = cfg.get_or("optim.eps", o.eps)?;
        o.weight_decay = cfg.get_or("optim.weight_decay", o.weight_decay)?;
        if let Some(v) = cfg.raw("optim.schedule") {
            o.schedule = v.parse().map_err(Error::Config)?;
        }
        c.seed = cfg.get_or("train.seed", c.seed)?;
        c.validate()?;
        Ok(c)
    }
}

fn pair(v: &[usize], key: &str) -> Result<[usize; 2]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("{key} needs two values, got {}", v.len())))
}

/// Every intermediate of one forward pass, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub stereo: Var,
    pub bev: Var,
    pub context: Var,
    pub confidence: Option<Var>,
    pub ensemble: Var,
    pub frustum: Var,
    pub voxels: Var,
    pub logits: Var,
}

impl Outputs {
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut v = vec![
            ("stereo", self.stereo),
            ("bev", self.bev),
            ("context", self.context),
            ("ensemble", self.ensemble),
            ("frustum", self.frustum),
            ("voxels", self.voxels),
            ("logits", self.logits),
        ];
        if let Some(c) = self.confidence {
            v.insert(3, ("confidence", c));
        }
        v
    }
}

/// Plain-tensor results of inference.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub stereo: Tensor,
    pub bev: Tensor,
    pub confidence: Option<Tensor>,
    pub ensemble: Tensor,
    pub logits: Tensor,
    pub grid: VoxelGrid,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    frustum: Arc<Resampler>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let p = Self::initial_params(&cfg, cfg.seed);
        Self::with_params(cfg, p)
    }

    /// Use existing weights; they must match the layout `cfg` would create.
    pub fn with_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let [hf, wf] = cfg.feature_dims();
        let feat_rig = cfg.rig.downscaled(ENCODER_DOWNSCALE);
        let frustum = Arc::new(ssc::frustum_resampler([cfg.bins.count, hf, wf], &cfg.grid, &feat_rig, &cfg.bins)?);
        Self::initial_params(&cfg, 0).check_compatible(&params)?;
        Ok(Self { cfg, params, frustum })
    }

    fn initial_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        stereo::init_params(&mut p, &cfg.stereo, &mut rng);
        bev::init_params(&mut p, &cfg.bev, cfg.stereo.feature_channels, cfg.bins.count, &mut rng);
        mie::init_params(&mut p, &cfg.mie, cfg.bins.count, &mut rng);
        ssc::init_params(&mut p, &cfg.ssc, cfg.bev.context_channels, &mut rng);
        p
    }

    pub fn forward_taped(&self, tape: &mut Tape, p: &Bound, left: Var, right: Var) -> Result<Outputs> {
        let c = &self.cfg;
        let expect = [1, c.image[0], c.image[1]];
        if tape.shape(left) != expect || tape.shape(right) != expect {
            return Err(Error::Shape(format!(
                "images must be {expect:?}, got {:?} and {:?}",
                tape.shape(left),
                tape.shape(right)
            )));
        }
        let (stereo_v, features) = stereo::build_stereo_volume_taped(tape, p, left, right, &c.rig, &c.bins, &c.stereo)?;
        let feat_rig = c.rig.downscaled(ENCODER_DOWNSCALE);
        let (bev_v, context) = bev::build_bev_volume_taped(tape, p, features, &feat_rig, &c.bev)?;
        let ens = mie::mie_forward_taped(tape, p, &c.mie, stereo_v, bev_v)?;
        let frustum = ssc::lift_taped(tape, context, ens.volume)?;
        let cb = c.bev.context_channels;
        let [hf, wf] = c.feature_dims();
        let flat = tape.reshape(frustum, &[cb, c.bins.count, hf, wf])?;
        let voxels = tape.resample(flat, &self.frustum)?;
        let logits = ssc::unet3d_head_taped(tape, p, voxels)?;
        Ok(Outputs {
            stereo: stereo_v,
            bev: bev_v,
            context,
            confidence: ens.confidence,
            ensemble: ens.volume,
            frustum,
            voxels,
            logits,
        })
    }

    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let l = tape.constant(left.clone());
        let r = tape.constant(right.clone());
        let o = self.forward_taped(&mut tape, &p, l, r)?;
        let logits = tape.value(o.logits).clone();
        Ok(Prediction {
            stereo: tape.value(o.stereo).clone(),
            bev: tape.value(o.bev).clone(),
            confidence: o.confidence.map(|c| tape.value(c).clone()),
            ensemble: tape.value(o.ensemble).clone(),
            grid: ssc::predict_grid(&logits)?,
            logits,
        })
    }

    /// Record the forward pass and all loss terms; returns `(total, parts, outputs)`.
    pub fn loss_taped(
        &self,
        tape: &mut Tape,
        p: &Bound,
        sample: &TrainSample,
        class_weights: &[f64],
    ) -> Result<(Var, LossVars, Outputs)> {
        let l = tape.constant(sample.left.clone());
        let r = tape.constant(sample.right.clone());
        let o = self.forward_taped(tape, p, l, r)?;
        let depth = ssc::depth_loss_taped(tape, o.ensemble, &sample.depth)?;
        let ce = ssc::class_weighted_ce_taped(tape, o.logits, &sample.grid, class_weights)?;
        let (sem, geo) = ssc::sem_geo_losses_taped(tape, o.logits, &sample.grid)?;
        let parts = LossVars {
            depth: depth.value,
            ce: ce.value,
            sem: sem.value,
            geo: geo.value,
        };
        let total = ssc::total_loss_taped(tape, &parts, &self.cfg.loss)?;
        Ok((total, parts, o))
    }
}

/// Inputs and targets for one training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub left: Tensor,
    pub right: Tensor,
    pub depth: DepthTarget,
    pub grid: VoxelGrid,
}

impl TrainSample {
    /// Depth targets are taken from the full-resolution pixel at offset
    /// `(s/2, s/2)` inside each `s × s` feature block.
    pub fn from_scene(sample: &SceneSample, cfg: &ModelConfig) -> Result<Self> {
        let [hf, wf] = cfg.feature_dims();
        let s = ENCODER_DOWNSCALE;
        let w = cfg.image[1];
        if sample.depth.len() != cfg.image[0] * w {
            return Err(Error::Shape(format!(
                "depth map has {} pixels, config expects {:?}",
                sample.depth.len(),
                cfg.image
            )));
        }
        let depths: Vec<Option<f64>> = (0..hf)
            .flat_map(|i| (0..wf).map(move |j| (i, j)))
            .map(|(i, j)| sample.depth[(i * s + s / 2) * w + j * s + s / 2])
            .collect();
        Ok(Self {
            left: sample.left.clone(),
            right: sample.right.clone(),
            depth: DepthTarget::from_depths(&depths, hf, wf, &cfg.bins)?,
            grid: sample.grid.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub parts: LossParts,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss,l_depth,l_ce,l_sem,l_geo";

    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!("{},{},{},{},{},{}", self.step, self.loss, p.depth, p.ce, p.sem, p.geo)
    }
}

/// Model plus optimizer state; steps are applied one at a time.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub class_weights: Vec<f64>,
    /// Run length the learning-rate schedule is stretched over (0 = constant).
    pub total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, samples: &[TrainSample]) -> Result<Self> {
        let grids: Vec<&VoxelGrid> = samples.iter().map(|s| &s.grid).collect();
        let class_weights = ssc::class_weights(&grids, model.cfg.classes);
        Ok(Self {
            opt: AdamW::new(model.cfg.optim.clone())?,
            model,
            class_weights,
            total_steps: 0,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Forward, backward and one AdamW update on `sample`.
    pub fn step(&mut self, sample: &TrainSample) -> Result<StepReport> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let (total, parts, outputs) = self.model.loss_taped(&mut tape, &p, sample, &self.class_weights)?;
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            let diag: Vec<String> = outputs
                .named()
                .into_iter()
                .map(|(n, v)| format!("{n}={:.6e}", tape.value(v).norm()))
                .collect();
            return Err(Error::NonFinite {
                step: self.step,
                diagnostics: diag.join(", "),
            });
        }
        tape.backward(total)?;
        let grads: BTreeMap<String, Tensor> = p
            .iter()
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        let bad: Vec<&str> = grads
            .iter()
            .filter(|(_, g)| !g.all_finite())
            .map(|(n, _)| n.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite {
                step: self.step,
                diagnostics: format!("loss {loss}; non-finite gradients for {}", bad.join(", ")),
            });
        }
        let factor = self.model.cfg.optim.schedule.factor(self.step, self.total_steps);
        self.opt.step_scaled(&mut self.model.params, &grads, factor)?;
        let report = StepReport {
            step: self.step,
            loss,
            parts: parts.values(&tape),
        };
        self.step += 1;
        Ok(report)
    }
}
