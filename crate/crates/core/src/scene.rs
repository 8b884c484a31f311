//! Procedural stereo scenes with exact depth and voxel ground truth.
//!
//! A scene is a ground slab plus axis-aligned boxes in the grid frame
//! (x lateral, y forward, z up). Both views are ray-cast; surface intensity
//! is value noise evaluated at the 3-D hit point, so a point seen by both
//! cameras has the same intensity in both images.

use crate::camera::{CameraIntrinsics, CameraRig, DepthBins};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::{GridSpec, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Side of the noise lattice in meters.
pub const TEXTURE_CELL: f64 = 0.15;
/// Intensity of rays that hit nothing.
pub const SKY: f64 = 0.5;
/// Hit points are pushed this far along the ray before voxel lookup.
pub const HIT_NUDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u16,
}

impl SceneBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    /// Slab test; entry distance along `dir` if the ray hits in front of `origin`.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let ta = (self.min[a] - origin[a]) / dir[a];
            let tb = (self.max[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Objects in the grid frame; the ground slab, when present, is one of them.
    pub objects: Vec<SceneBox>,
    pub rig: CameraRig,
    /// Image `[height, width]`.
    pub image: [usize; 2],
    pub grid: GridSpec,
    /// `M + 1`.
    pub classes: usize,
    pub bins: DepthBins,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Generation("scene has no objects".into()));
        }
        let ext = self.grid.extent();
        for (i, o) in self.objects.iter().enumerate() {
            let inside = (0..3).all(|a| o.min[a] >= 0.0 && o.max[a] <= ext[a] + 1e-9 && o.min[a] < o.max[a]);
            if !inside {
                return Err(Error::Generation(format!("object {i} {o:?} leaves the grid {ext:?}")));
            }
            if o.class == 0 || o.class as usize >= self.classes {
                return Err(Error::Generation(format!("object {i} has class {} outside 1..{}", o.class, self.classes)));
            }
        }
        if self.image.contains(&0) {
            return Err(Error::Generation("image extents must be nonzero".into()));
        }
        Ok(())
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `1 × H × W` intensities in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// Right pixels whose surface point is hidden from the left camera.
    pub right_occluded: Vec<bool>,
    /// Left-camera depth per pixel (`None` where the ray hits nothing).
    pub depth: Vec<Option<f64>>,
    pub grid: VoxelGrid,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(keys: &[u64]) -> f64 {
    let h = keys.iter().fold(0u64, |acc, &k| splitmix(acc ^ k));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Ray caster bound to one scene and texture seed.
pub struct Renderer<'a> {
    pub spec: &'a SceneSpec,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Distance along a ray whose camera-frame direction has unit z, i.e. depth.
    pub depth: f64,
    pub point: [f64; 3],
    pub object: usize,
}

impl<'a> Renderer<'a> {
    pub fn new(spec: &'a SceneSpec, seed: u64) -> Self {
        Self { spec, seed }
    }

    /// Value noise on a `TEXTURE_CELL` lattice, private to each object.
    pub fn texture(&self, object: usize, p: [f64; 3]) -> f64 {
        let q = p.map(|c| c / TEXTURE_CELL);
        let base = q.map(f64::floor);
        let f: Vec<f64> = (0..3).map(|a| q[a] - base[a]).collect();
        let mut acc = 0.0;
        for corner in 0..8u64 {
            let mut w = 1.0;
            let mut key = [self.seed, object as u64, 0, 0, 0];
            for a in 0..3 {
                let hi = corner >> a & 1 == 1;
                w *= if hi { f[a] } else { 1.0 - f[a] };
                key[2 + a] = (base[a] as i64 + hi as i64) as u64;
            }
            acc += w * hash_unit(&key);
        }
        acc
    }

    fn cast(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in self.spec.objects.iter().enumerate() {
            if let Some(t) = o.intersect(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    fn ray(&self, intr: &CameraIntrinsics, u: f64, v: f64) -> [f64; 3] {
        self.spec
            .rig
            .rotate_to_grid([(u - intr.cu) / intr.fu, (v - intr.cv) / intr.fv, 1.0])
    }

    /// Left-camera ray through continuous pixel `(u, v)`.
    pub fn left_hit(&self, u: f64, v: f64) -> Option<Hit> {
        let o = self.spec.rig.left_center();
        let d = self.ray(&self.spec.rig.left, u, v);
        self.cast(o, d).map(|(t, i)| Hit {
            depth: t,
            point: [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]],
            object: i,
        })
    }

    /// Right-camera ray through continuous pixel `(u, v)`; depth is measured
    /// along the shared optical axis.
    pub fn right_hit(&self, u: f64, v: f64) -> Option<Hit> {
        let o = self.spec.rig.right_center();
        let d = self.ray(&self.spec.rig.right, u, v);
        self.cast(o, d).map(|(t, i)| Hit {
            depth: t,
            point: [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]],
            object: i,
        })
    }

    pub fn left_intensity(&self, u: f64, v: f64) -> f64 {
        self.left_hit(u, v).map_or(SKY, |h| self.texture(h.object, h.point))
    }

    /// Right-view intensity at a continuous pixel; `None` when the surface
    /// point is occluded from the left camera.
    pub fn right_visible_intensity(&self, u: f64, v: f64) -> Option<f64> {
        match self.right_hit(u, v) {
            None => Some(SKY),
            Some(h) => {
                let c = self.spec.rig.grid_to_camera(h.point);
                let (lu, lv) = self.spec.rig.left.project(c)?;
                let lh = self.left_hit(lu, lv)?;
                let visible = lh.object == h.object && (lh.depth - c[2]).abs() <= 1e-6 * c[2].max(1.0);
                visible.then(|| self.texture(h.object, h.point))
            }
        }
    }

    /// Class of the voxel a left ray at `(u, v)` lands in, via the depth map.
    pub fn voxel_along_left_ray(&self, u: f64, v: f64, depth: f64) -> Option<[usize; 3]> {
        let o = self.spec.rig.left_center();
        let d = self.ray(&self.spec.rig.left, u, v);
        let t = depth + HIT_NUDGE;
        self.spec.grid.locate([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]])
    }
}

/// Voxelize by voxel centre; voxels whose centre falls outside the left
/// image or the depth-bin range are marked invalid.
pub fn voxelize(spec: &SceneSpec) -> VoxelGrid {
    let g = &spec.grid;
    let mut grid = VoxelGrid::new(g.dims, spec.classes);
    let half_bin = 0.5 * spec.bins.spacing();
    for x in 0..g.dims[0] {
        for y in 0..g.dims[1] {
            for z in 0..g.dims[2] {
                let p = g.center(x, y, z);
                let i = grid.index(x, y, z);
                if let Some(o) = spec.objects.iter().find(|o| o.contains(p)) {
                    grid.labels[i] = o.class;
                }
                let c = spec.rig.grid_to_camera(p);
                let seen = spec.rig.left.project(c).is_some_and(|(u, v)| {
                    u >= -0.5
                        && u <= spec.image[1] as f64 - 0.5
                        && v >= -0.5
                        && v <= spec.image[0] as f64 - 0.5
                        && c[2] >= spec.bins.d_min - half_bin
                        && c[2] <= spec.bins.d_max + half_bin
                });
                grid.invalid[i] = !seen;
            }
        }
    }
    grid
}

/// Ray-cast both views and voxelize the same geometry.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let r = Renderer::new(spec, seed);
    let [h, w] = spec.image;
    let mut left = vec![SKY; h * w];
    let mut right = vec![SKY; h * w];
    let mut occluded = vec![false; h * w];
    let mut depth = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = (x as f64, y as f64);
            if let Some(hit) = r.left_hit(u, v) {
                depth[i] = Some(hit.depth);
                left[i] = r.texture(hit.object, hit.point);
            }
            match r.right_visible_intensity(u, v) {
                Some(val) => right[i] = val,
                None => {
                    occluded[i] = true;
                    right[i] = hash_unit(&[seed, 0x6f63_636c, i as u64]);
                }
            }
        }
    }
    if depth.iter().all(Option::is_none) {
        return Err(Error::Generation("no object is visible from the left camera".into()));
    }
    Ok(SceneSample {
        left: Tensor::new(&[1, h, w], left)?,
        right: Tensor::new(&[1, h, w], right)?,
        right_occluded: occluded,
        depth,
        grid: voxelize(spec),
    })
}

/// Desk-scale layout: the left camera sits 2 m behind the grid's near face,
/// centred laterally at mid-height, looking along +y.
pub fn desk_extrinsics(grid: &GridSpec) -> [f64; 16] {
    let e = grid.extent();
    [
        1.0, 0.0, 0.0, e[0] / 2.0, //
        0.0, 0.0, 1.0, -2.0, //
        0.0, -1.0, 0.0, e[2] / 2.0, //
        0.0, 0.0, 0.0, 1.0,
    ]
}

/// Random voxel-aligned layout: a one-voxel ground slab of class 1 plus two
/// to four boxes of classes `2..M` standing on it inside the camera view.
pub fn random_spec(
    seed: u64,
    rig: CameraRig,
    image: [usize; 2],
    grid: GridSpec,
    classes: usize,
    bins: DepthBins,
) -> Result<SceneSpec> {
    if classes < 3 {
        return Err(Error::Generation(format!("need at least 2 semantic classes, got {}", classes - 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = grid.voxel_size;
    let [nx, ny, nz] = grid.dims;
    let mut objects = vec![SceneBox {
        min: [0.0; 3],
        max: [nx as f64 * s, ny as f64 * s, s],
        class: 1,
    }];
    let count = rng.gen_range(2..=4);
    let mut tries = 0;
    while objects.len() < count + 1 && tries < 200 {
        tries += 1;
        let sx = rng.gen_range(2..=(nx / 3).max(2));
        let sy = rng.gen_range(2..=(ny / 4).max(2));
        let sz = rng.gen_range(2..=(nz * 3 / 4).max(2));
        let x0 = rng.gen_range(nx / 6..=nx.saturating_sub(sx + nx / 6).max(nx / 6));
        let y0 = rng.gen_range(ny / 4..=ny.saturating_sub(sy + 1).max(ny / 4));
        let b = SceneBox {
            min: [x0 as f64 * s, y0 as f64 * s, s],
            max: [(x0 + sx) as f64 * s, (y0 + sy) as f64 * s, ((1 + sz).min(nz)) as f64 * s],
            class: 2 + (objects.len() - 1) as u16 % (classes as u16 - 2),
        };
        let overlaps = objects[1..].iter().any(|o| {
            (0..2).all(|a| b.min[a] < o.max[a] + s && o.min[a] < b.max[a] + s)
        });
        if !overlaps {
            objects.push(b);
        }
    }
    let spec = SceneSpec {
        objects,
        rig,
        image,
        grid,
        classes,
        bins,
    };
    spec.validate()?;
    Ok(spec)
}
