//! Completion IoU and per-class semantic IoU over voxel grids.

use crate::error::{Error, Result};
use crate::voxel::{VoxelGrid, FREE};
use serde::Serialize;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `TP / (TP + FP + FN)`; `None` when the class is absent from both sides.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    /// Scene completion IoU over occupied-vs-free.
    pub iou: Option<f64>,
    /// Semantic classes `1..=M`, in order.
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub counted_voxels: u64,
}

/// Unweighted mean over the classes that have a defined IoU.
pub fn mean_iou(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Running confusion counts over any number of grid pairs.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    occ: Confusion,
    cls: Vec<Confusion>,
    counted: u64,
}

impl IouAccumulator {
    pub fn new(semantic_classes: usize) -> Self {
        Self {
            cls: vec![Confusion::default(); semantic_classes],
            ..Default::default()
        }
    }

    /// Voxels invalid in either grid are excluded from every count.
    pub fn add(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<()> {
        if pred.dims != gt.dims || pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims, gt.dims
            )));
        }
        let m = gt.class_count.max(pred.class_count).saturating_sub(1);
        if m > self.cls.len() {
            self.cls.resize(m, Confusion::default());
        }
        let cls = &mut self.cls;
        for i in 0..gt.len() {
            if gt.invalid[i] || pred.invalid[i] {
                continue;
            }
            self.counted += 1;
            let (p, g) = (pred.labels[i], gt.labels[i]);
            match (p != FREE, g != FREE) {
                (true, true) => self.occ.tp += 1,
                (true, false) => self.occ.fp += 1,
                (false, true) => self.occ.fn_ += 1,
                (false, false) => {}
            }
            if p == g {
                if p != FREE {
                    cls[p as usize - 1].tp += 1;
                }
            } else {
                if p != FREE {
                    cls[p as usize - 1].fp += 1;
                }
                if g != FREE {
                    cls[g as usize - 1].fn_ += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self.cls.iter().map(Confusion::iou).collect();
        IouReport {
            iou: self.occ.iou(),
            miou: mean_iou(&per_class),
            per_class,
            counted_voxels: self.counted,
        }
    }
}

pub fn compute_iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(gt.class_count.saturating_sub(1));
    acc.add(pred, gt)?;
    Ok(acc.report())
}

impl IouReport {
    /// `class,iou` rows; classes without a defined IoU have an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (i, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "{},{v}", i + 1),
                None => writeln!(s, "{},", i + 1),
            }
            .expect("string write");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "iou": self.iou,
            "miou": self.miou,
            "per_class": self.per_class,
            "counted_voxels": self.counted_voxels,
        })
        .to_string()
    }
}
