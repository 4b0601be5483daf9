//! Overlap metrics (Dice, false negative / false positive error) and tree
//! metrics (tree length and branches detected) for airway masks.

mod skeleton;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{atomic_write, MaskVolume, VolioError};

pub use skeleton::{
    branch_decompose, branch_is_detected, branches_detected, is_simple, skeletonize_3d, tree_detected, Decomposition,
    Skeleton, SkeletonBranch,
};

pub const METRICS_HEADER: &str = "scan_id,dice,fne,fpe,td,bd,tp,fp,fn,gt_branches,detected_branches,gt_tree_length_mm";
/// `scan_id` cell of the aggregate row.
pub const FOOTER_ID: &str = "mean±std";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    Dims([usize; 3], [usize; 3]),
    #[error("ground-truth centerline has zero length")]
    EmptyCenterline,
    #[error("ground truth has no branches")]
    NoBranches,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Volume(#[from] VolioError),
}

/// Voxelwise agreement counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn dice(&self) -> f64 {
        dice(self.tp as f64, self.fp as f64, self.r#fn as f64)
    }

    pub fn fne(&self) -> f64 {
        fne(self.tp as f64, self.r#fn as f64)
    }

    pub fn fpe(&self) -> f64 {
        fpe(self.tp as f64, self.fp as f64)
    }
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::Dims(pred.dims(), gt.dims()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(tp: f64, fp: f64, fn_: f64) -> f64 {
    let den = 2.0 * tp + fp + fn_;
    if den == 0.0 {
        1.0
    } else {
        2.0 * tp / den
    }
}

/// `FN / (TP + FN)`; 0 for an empty ground truth.
pub fn fne(tp: f64, fn_: f64) -> f64 {
    let den = tp + fn_;
    if den == 0.0 {
        0.0
    } else {
        fn_ / den
    }
}

/// `FP / (TP + FP)`; 0 for an empty prediction.
pub fn fpe(tp: f64, fp: f64) -> f64 {
    let den = tp + fp;
    if den == 0.0 {
        0.0
    } else {
        fp / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Fraction of a branch's centerline voxels that must be predicted for
    /// it to count as detected (at least one voxel regardless).
    pub bd_min_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { bd_min_fraction: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scan_id: String,
    pub dice: f64,
    pub fne: f64,
    pub fpe: f64,
    pub td: f64,
    pub bd: f64,
    pub counts: ConfusionCounts,
    pub gt_branches: usize,
    pub detected_branches: usize,
    pub gt_tree_length_mm: f64,
}

/// Overlap metrics of `pred` against `gt`, tree metrics on the skeleton of `gt`.
pub fn evaluate_pair(scan_id: &str, pred: &MaskVolume, gt: &MaskVolume, opts: EvalOptions) -> Result<MetricsReport, MetricsError> {
    let counts = confusion(pred, gt)?;
    let skel = skeletonize_3d(gt);
    let dec = branch_decompose(&skel);
    let td = tree_detected(&skel, pred)?;
    let bd = branches_detected(&dec.branches, pred, opts.bd_min_fraction)?;
    let detected = dec
        .branches
        .iter()
        .filter(|b| branch_is_detected(b, pred, opts.bd_min_fraction))
        .count();
    Ok(MetricsReport {
        scan_id: scan_id.to_string(),
        dice: counts.dice(),
        fne: counts.fne(),
        fpe: counts.fpe(),
        td,
        bd,
        counts,
        gt_branches: dec.branches.len(),
        detected_branches: detected,
        gt_tree_length_mm: skel.total_length(),
    })
}

fn row_values(r: &MetricsReport) -> [f64; 11] {
    [
        r.dice,
        r.fne,
        r.fpe,
        r.td,
        r.bd,
        r.counts.tp as f64,
        r.counts.fp as f64,
        r.counts.r#fn as f64,
        r.gt_branches as f64,
        r.detected_branches as f64,
        r.gt_tree_length_mm,
    ]
}

/// Per-column mean and population standard deviation.
pub fn summarize(rows: &[MetricsReport]) -> Vec<(f64, f64)> {
    let n = rows.len() as f64;
    (0..11)
        .map(|k| {
            if rows.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let vals: Vec<f64> = rows.iter().map(|r| row_values(r)[k]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Metrics sheet: one row per report, then a `mean±std` row.
pub fn metrics_csv(rows: &[MetricsReport]) -> Result<Vec<u8>, MetricsError> {
    let err = |e: csv::Error| MetricsError::Csv(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(',')).map_err(err)?;
    for r in rows {
        let mut rec = vec![
            r.scan_id.clone(),
            r.dice.to_string(),
            r.fne.to_string(),
            r.fpe.to_string(),
            r.td.to_string(),
            r.bd.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.r#fn.to_string(),
            r.gt_branches.to_string(),
            r.detected_branches.to_string(),
        ];
        rec.push(r.gt_tree_length_mm.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    let mut footer = vec![FOOTER_ID.to_string()];
    footer.extend(summarize(rows).into_iter().map(|(m, s)| format!("{m}±{s}")));
    w.write_record(&footer).map_err(err)?;
    w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))
}

pub fn write_metrics_csv(rows: &[MetricsReport], path: &Path) -> Result<(), MetricsError> {
    Ok(atomic_write(path, &metrics_csv(rows)?)?)
}
