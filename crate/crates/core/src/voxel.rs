//! Semantic voxel grids and their raw label files.
//!
//! Label files are row-major little-endian `u16`. A companion file with the
//! `.invalid` extension packs one bit per voxel, row-major, most significant
//! bit first; set bits mark voxels excluded from training and scoring.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Class 0 is free space; `1..class_count` are semantic classes.
pub const FREE: u16 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub invalid: Vec<bool>,
    /// `M + 1`: free plus `M` semantic classes.
    pub class_count: usize,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], class_count: usize) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            labels: vec![FREE; n],
            invalid: vec![false; n],
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn semantic_classes(&self) -> usize {
        self.class_count - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.labels.len() != n || self.invalid.len() != n {
            return Err(Error::Shape(format!(
                "grid {:?} holds {} labels and {} mask bits",
                self.dims,
                self.labels.len(),
                self.invalid.len()
            )));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .zip(&self.invalid)
            .enumerate()
            .find(|(_, (&l, &inv))| !inv && l as usize >= self.class_count)
            .map(|(i, (l, _))| (i, *l))
        {
            return Err(Error::Format(format!(
                "voxel {i} has label {l} outside {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.invalid.iter().filter(|&&b| !b).count()
    }
}

/// Placement of a voxel grid: voxel `(x, y, z)` spans
/// `[x·s, (x+1)·s) × [y·s, (y+1)·s) × [z·s, (z+1)·s)` in the grid frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        if dims.contains(&0) || !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::Argument(format!(
                "grid needs nonzero extents and a positive voxel size, got {dims:?} × {voxel_size}"
            )));
        }
        Ok(Self { dims, voxel_size })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = self.voxel_size;
        [(x as f64 + 0.5) * s, (y as f64 + 0.5) * s, (z as f64 + 0.5) * s]
    }

    /// Voxel containing a grid-frame point, if inside.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let c = (p[a] / self.voxel_size).floor();
            if !(c >= 0.0 && c < self.dims[a] as f64) {
                return None;
            }
            out[a] = c as usize;
        }
        Some(out)
    }

    pub fn extent(&self) -> [f64; 3] {
        self.dims.map(|d| d as f64 * self.voxel_size)
    }
}

/// Raw label id → class index; ids mapped to `None` become invalid voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    map: BTreeMap<u16, Option<u16>>,
}

impl RemapTable {
    pub fn identity(class_count: usize) -> Self {
        Self {
            map: (0..class_count as u16).map(|c| (c, Some(c))).collect(),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u16, Option<u16>)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    /// `raw:class` pairs separated by whitespace; `raw:ignore` marks invalid.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for item in text.split_whitespace() {
            let (raw, cls) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("remap entry {item:?} is not raw:class")))?;
            let raw: u16 = raw
                .parse()
                .map_err(|_| Error::Config(format!("bad raw id in {item:?}")))?;
            let cls = if cls == "ignore" {
                None
            } else {
                Some(
                    cls.parse()
                        .map_err(|_| Error::Config(format!("bad class in {item:?}")))?,
                )
            };
            map.insert(raw, cls);
        }
        Ok(Self { map })
    }

    pub fn lookup(&self, raw: u16) -> Result<Option<u16>> {
        self.map
            .get(&raw)
            .copied()
            .ok_or_else(|| Error::Format(format!("unmapped label id {raw}")))
    }
}

pub fn invalid_path(label_path: &Path) -> PathBuf {
    label_path.with_extension("invalid")
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!(
            "invalid mask has {} bytes, {n} voxels need {}",
            bytes.len(),
            n.div_ceil(8)
        )));
    }
    Ok((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

/// Read a `u16` label file (and its `.invalid` companion when present).
pub fn read_voxel_labels(
    path: impl AsRef<Path>,
    dims: [usize; 3],
    remap: &RemapTable,
    class_count: usize,
) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let n: usize = dims.iter().product();
    let bytes = std::fs::read(path)?;
    if bytes.len() != n * 2 {
        return Err(Error::Format(format!(
            "{}: {} bytes, dims {dims:?} need exactly {}",
            path.display(),
            bytes.len(),
            n * 2
        )));
    }
    let inv_path = invalid_path(path);
    let mut invalid = if inv_path.exists() {
        unpack_bits(&std::fs::read(&inv_path)?, n)?
    } else {
        vec![false; n]
    };
    let mut labels = Vec::with_capacity(n);
    for (i, c) in bytes.chunks_exact(2).enumerate() {
        let raw = u16::from_le_bytes([c[0], c[1]]);
        if invalid[i] {
            labels.push(FREE);
            continue;
        }
        match remap.lookup(raw)? {
            Some(cls) => labels.push(cls),
            None => {
                invalid[i] = true;
                labels.push(FREE);
            }
        }
    }
    let grid = VoxelGrid {
        dims,
        labels,
        invalid,
        class_count,
    };
    grid.validate()?;
    Ok(grid)
}

/// Write labels plus the `.invalid` companion.
pub fn write_voxel_labels(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(grid.len() * 2);
    for &l in &grid.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    std::fs::write(invalid_path(path), pack_bits(&grid.invalid))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_packing() {
        let bits = [true, false, false, false, false, false, false, true, true];
        assert_eq!(pack_bits(&bits), vec![0b1000_0001, 0b1000_0000]);
        assert_eq!(unpack_bits(&pack_bits(&bits), 9).unwrap(), bits);
        assert!(unpack_bits(&[0], 9).is_err());
    }

    #[test]
    fn crafted_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.label");
        let mut g = VoxelGrid::new([2, 2, 1], 2);
        g.labels = vec![0, 1, 1, 0];
        write_voxel_labels(&p, &g).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw, vec![0, 0, 1, 0, 1, 0, 0, 0]);
        let back = read_voxel_labels(&p, [2, 2, 1], &RemapTable::identity(2), 2).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn length_and_remap_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.label");
        std::fs::write(&p, [0u8; 6]).unwrap();
        let e = read_voxel_labels(&p, [2, 2, 1], &RemapTable::identity(2), 2).unwrap_err();
        assert!(matches!(e, Error::Format(_)));
        std::fs::write(&p, [0, 0, 9, 0]).unwrap();
        let e = read_voxel_labels(&p, [2, 1, 1], &RemapTable::identity(2), 2).unwrap_err();
        assert!(e.to_string().contains("unmapped label id 9"), "{e}");
    }

    #[test]
    fn remap_parse_and_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.label");
        std::fs::write(&p, [10, 0, 0, 0, 255, 0]).unwrap();
        let table = RemapTable::parse("0:0 10:1 255:ignore").unwrap();
        let g = read_voxel_labels(&p, [3, 1, 1], &table, 2).unwrap();
        assert_eq!(g.labels, vec![1, 0, 0]);
        assert_eq!(g.invalid, vec![false, false, true]);
    }

    #[test]
    fn full_scale_file_size() {
        let n: usize = [256usize, 256, 32].iter().product();
        assert_eq!(n * 2, 4_194_304);
    }
}
