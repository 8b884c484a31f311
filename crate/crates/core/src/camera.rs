//! Stereo calibration, the disparity/depth relation and depth hypotheses.

use crate::config::KvConfig;
use crate::error::{arg, Error, Result};

/// Disparities at or below this many pixels are rejected.
pub const EPSILON_DISP: f64 = 1e-6;

/// Length of the flattened camera-parameter vector.
pub const PARAM_LEN: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64) -> Result<Self> {
        if !(fu > 0.0 && fv > 0.0) || !cu.is_finite() || !cv.is_finite() {
            return arg(format!("focal lengths must be positive, got fu={fu}, fv={fv}"));
        }
        Ok(Self { fu, fv, cu, cv })
    }

    /// Intrinsics of an image downsampled by `factor` (pixel centers preserved).
    pub fn downscaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        Self {
            fu: self.fu / s,
            fv: self.fv / s,
            cu: (self.cu + 0.5) / s - 0.5,
            cv: (self.cv + 0.5) / s - 0.5,
        }
    }

    /// Pinhole projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| {
            (
                self.fu * p[0] / p[2] + self.cu,
                self.fv * p[1] / p[2] + self.cv,
            )
        })
    }
}

/// Rectified stereo pair. The right camera sits `baseline` meters along the
/// left camera's +x axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub baseline: f64,
    /// Row-major 4×4 pose of the left camera in the voxel-grid frame
    /// (camera → grid).
    pub extrinsics: [f64; 16],
}

pub const IDENTITY_POSE: [f64; 16] = [
    1.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 0.0, 0.0, //
    0.0, 0.0, 1.0, 0.0, //
    0.0, 0.0, 0.0, 1.0,
];

impl CameraRig {
    pub fn new(
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        baseline: f64,
        extrinsics: [f64; 16],
    ) -> Result<Self> {
        if !(baseline > 0.0) {
            return arg(format!("baseline must be positive, got {baseline}"));
        }
        if extrinsics[12..] != [0.0, 0.0, 0.0, 1.0] {
            return arg("extrinsics bottom row must be [0, 0, 0, 1]");
        }
        Ok(Self {
            left,
            right,
            baseline,
            extrinsics,
        })
    }

    /// Same intrinsics on both cameras.
    pub fn symmetric(intr: CameraIntrinsics, baseline: f64, extrinsics: [f64; 16]) -> Result<Self> {
        Self::new(intr, intr, baseline, extrinsics)
    }

    /// Reads `fu, fv, cu, cv, baseline, extrinsics` (16 values) under `prefix`.
    pub fn from_config(cfg: &KvConfig, prefix: &str) -> Result<Self> {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        let intr = CameraIntrinsics::new(
            cfg.require(&key("fu"))?,
            cfg.require(&key("fv"))?,
            cfg.require(&key("cu"))?,
            cfg.require(&key("cv"))?,
        )?;
        let baseline = cfg.require(&key("baseline"))?;
        let ext = match cfg.list::<f64>(&key("extrinsics"))? {
            None => IDENTITY_POSE,
            Some(v) => v.try_into().map_err(|v: Vec<f64>| {
                Error::Config(format!("extrinsics needs 16 values, got {}", v.len()))
            })?,
        };
        Self::symmetric(intr, baseline, ext)
    }

    pub fn downscaled(&self, factor: usize) -> Self {
        Self {
            left: self.left.downscaled(factor),
            right: self.right.downscaled(factor),
            ..*self
        }
    }

    /// Grid-frame point → left camera frame.
    pub fn grid_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let d = [p[0] - e[3], p[1] - e[7], p[2] - e[11]];
        // inverse rotation = transpose
        [
            e[0] * d[0] + e[4] * d[1] + e[8] * d[2],
            e[1] * d[0] + e[5] * d[1] + e[9] * d[2],
            e[2] * d[0] + e[6] * d[1] + e[10] * d[2],
        ]
    }

    /// Left camera frame → grid frame.
    pub fn camera_to_grid(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        [
            e[0] * p[0] + e[1] * p[1] + e[2] * p[2] + e[3],
            e[4] * p[0] + e[5] * p[1] + e[6] * p[2] + e[7],
            e[8] * p[0] + e[9] * p[1] + e[10] * p[2] + e[11],
        ]
    }

    /// Left-camera center in the grid frame.
    pub fn left_center(&self) -> [f64; 3] {
        [self.extrinsics[3], self.extrinsics[7], self.extrinsics[11]]
    }

    /// Right-camera center in the grid frame.
    pub fn right_center(&self) -> [f64; 3] {
        self.camera_to_grid([self.baseline, 0.0, 0.0])
    }

    /// Camera-frame direction → grid-frame direction.
    pub fn rotate_to_grid(&self, d: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        [
            e[0] * d[0] + e[1] * d[1] + e[2] * d[2],
            e[4] * d[0] + e[5] * d[1] + e[6] * d[2],
            e[8] * d[0] + e[9] * d[1] + e[10] * d[2],
        ]
    }
}

/// `z = f_u · b / D`.
pub fn disparity_to_depth(disparity: f64, rig: &CameraRig) -> Result<f64> {
    if !(disparity > EPSILON_DISP) {
        return Err(Error::InvalidDisparity(disparity));
    }
    Ok(rig.left.fu * rig.baseline / disparity)
}

/// `D = f_u · b / z`.
pub fn depth_to_disparity(depth: f64, rig: &CameraRig) -> Result<f64> {
    if !(depth > 0.0) {
        return arg(format!("depth must be positive, got {depth}"));
    }
    Ok(rig.left.fu * rig.baseline / depth)
}

/// Pixel plus depth → camera-frame point.
pub fn backproject(u: f64, v: f64, z: f64, intr: &CameraIntrinsics) -> Result<[f64; 3]> {
    if !(z > 0.0) {
        return arg(format!("depth must be positive, got {z}"));
    }
    Ok([(u - intr.cu) * z / intr.fu, (v - intr.cv) * z / intr.fv, z])
}

/// `[f_u, f_v, c_u, c_v, b, extrinsics (16, row-major)]`.
pub fn assemble_params(rig: &CameraRig) -> [f64; PARAM_LEN] {
    let mut p = [0.0; PARAM_LEN];
    p[0] = rig.left.fu;
    p[1] = rig.left.fv;
    p[2] = rig.left.cu;
    p[3] = rig.left.cv;
    p[4] = rig.baseline;
    p[5..].copy_from_slice(&rig.extrinsics);
    p
}

/// Depth hypotheses uniformly spaced in depth; the first and last centers
/// sit exactly on `d_min` and `d_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max) || !d_max.is_finite() {
            return arg(format!("depth range must satisfy 0 < d_min < d_max, got [{d_min}, {d_max}]"));
        }
        if count < 2 {
            return arg("at least two depth bins are needed");
        }
        Ok(Self {
            d_min,
            d_max,
            count,
        })
    }

    pub fn spacing(&self) -> f64 {
        (self.d_max - self.d_min) / (self.count - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.d_max
        } else {
            self.d_min + i as f64 * self.spacing()
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }

    /// Continuous bin coordinate of depth `z` (0 at `d_min`).
    pub fn coordinate(&self, z: f64) -> f64 {
        (z - self.d_min) / self.spacing()
    }

    /// Nearest bin, ties rounding down; `None` outside half a bin of the range.
    pub fn nearest(&self, z: f64) -> Option<usize> {
        let c = self.coordinate(z);
        if !(c >= -0.5 && c <= self.count as f64 - 0.5) {
            return None;
        }
        let lo = c.floor();
        let frac = c - lo;
        let i = if frac > 0.5 { lo + 1.0 } else { lo };
        Some((i.max(0.0) as usize).min(self.count - 1))
    }
}
