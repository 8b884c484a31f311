//! On-disk layout of rendered samples and inference dumps.
//!
//! A sample directory holds `left.vol` and `right.vol` (`1×H×W`),
//! `depth.vol` (`H×W`, 0 where no surface was hit), `occluded.vol`
//! (`H×W`, 1 for right pixels hidden from the left view) and the voxel
//! labels `grid.label` with their `grid.invalid` mask.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::{random_spec, render_scene, SceneSample};
use rayon::prelude::*;
use crate::tensor::Tensor;
use crate::voxel::{read_voxel_labels, write_voxel_labels, RemapTable, VoxelGrid};
use crate::vol;
use std::path::{Path, PathBuf};

pub const LABEL_FILE: &str = "grid.label";

/// Render `count` random scenes; scene `i` uses seed `seed + i` for both
/// its layout and its texture, so results do not depend on scheduling.
pub fn synthesize(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i);
            let spec = random_spec(s, cfg.rig, cfg.image, cfg.grid, cfg.classes, cfg.bins)?;
            render_scene(&spec, s)
        })
        .collect()
}

pub fn write_sample(dir: impl AsRef<Path>, s: &SceneSample) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let [_, h, w] = [s.left.shape()[0], s.left.shape()[1], s.left.shape()[2]];
    vol::write(dir.join("left.vol"), &s.left)?;
    vol::write(dir.join("right.vol"), &s.right)?;
    let depth: Vec<f64> = s.depth.iter().map(|d| d.unwrap_or(0.0)).collect();
    vol::write(dir.join("depth.vol"), &Tensor::new(&[h, w], depth)?)?;
    let occ: Vec<f64> = s.right_occluded.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    vol::write(dir.join("occluded.vol"), &Tensor::new(&[h, w], occ)?)?;
    write_voxel_labels(dir.join(LABEL_FILE), &s.grid)
}

/// Read a sample written by [`write_sample`]. Image values pass through
/// `f32` on disk.
pub fn read_sample(dir: impl AsRef<Path>, grid_dims: [usize; 3], classes: usize) -> Result<SceneSample> {
    let dir = dir.as_ref();
    let left = vol::read(dir.join("left.vol"))?;
    let right = vol::read(dir.join("right.vol"))?;
    let depth = vol::read(dir.join("depth.vol"))?;
    let occluded = vol::read(dir.join("occluded.vol"))?;
    if left.rank() != 3 || left.shape() != right.shape() || depth.len() * left.shape()[0] != left.len() {
        return Err(Error::Format(format!(
            "{}: inconsistent image/depth extents {:?}, {:?}, {:?}",
            dir.display(),
            left.shape(),
            right.shape(),
            depth.shape()
        )));
    }
    let grid = read_voxel_labels(dir.join(LABEL_FILE), grid_dims, &RemapTable::identity(classes), classes)?;
    Ok(SceneSample {
        left,
        right,
        right_occluded: occluded.data().iter().map(|&v| v != 0.0).collect(),
        depth: depth.data().iter().map(|&d| (d > 0.0).then_some(d)).collect(),
        grid,
    })
}

/// Subdirectories of `dir` that contain a label file, sorted by name.
pub fn sample_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir.as_ref())? {
        let p = e?.path();
        if p.join(LABEL_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Binary greyscale PGM of an `H×W` map scaled from `[lo, hi]` to `0..=255`.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor, lo: f64, hi: f64) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("PGM needs an H×W map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    bytes.extend(map.data().iter().map(|&v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Labels from every `.label` file under `dir`, keyed by relative path.
pub fn label_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, here: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in std::fs::read_dir(here)? {
            let p = e?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.extension().is_some_and(|x| x == "label") {
                out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir.as_ref(), dir.as_ref(), &mut out)?;
    out.sort();
    Ok(out)
}

pub fn read_grid(path: impl AsRef<Path>, dims: [usize; 3], classes: usize) -> Result<VoxelGrid> {
    read_voxel_labels(path, dims, &RemapTable::identity(classes), classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap(), 0.0, 1.0).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[..11], b"P5\n3 1\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255]);
    }
}
