use std::path::Path;

use serde::Serialize;

use super::{atomic_write, MaskVolume, VolioError};
use crate::inferpost::{connected_components, Connectivity};

pub const REPORT_HEADER: &str =
    "scan_id,voxels,volume_mm3,bbox_min_x,bbox_min_y,bbox_min_z,bbox_max_x,bbox_max_y,bbox_max_z,components";

/// Volumetric statistics of one mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumetricReportRow {
    pub scan_id: String,
    pub voxels: u64,
    pub volume_mm3: f64,
    /// Inclusive `(min, max)` voxel indices; `None` for an empty mask.
    pub bbox: Option<([usize; 3], [usize; 3])>,
    pub components: usize,
}

pub fn volumetric_report(m: &MaskVolume, id: &str) -> VolumetricReportRow {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut voxels = 0u64;
    for (i, _) in m.data().iter().enumerate().filter(|(_, &v)| v != 0) {
        voxels += 1;
        let c = m.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let [sx, sy, sz] = m.spacing();
    VolumetricReportRow {
        scan_id: id.to_string(),
        voxels,
        volume_mm3: voxels as f64 * (sx * sy * sz),
        bbox: (voxels > 0).then_some((lo, hi)),
        components: connected_components(m, Connectivity::TwentySix).count(),
    }
}

/// Report sheet, one row per mask in the given order. Empty bounding boxes
/// are written as empty cells.
pub fn write_report_csv(rows: &[VolumetricReportRow], path: &Path) -> Result<(), VolioError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(REPORT_HEADER.split(','))?;
    for r in rows {
        let mut rec = vec![r.scan_id.clone(), r.voxels.to_string(), r.volume_mm3.to_string()];
        match r.bbox {
            Some((lo, hi)) => rec.extend(lo.iter().chain(&hi).map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.push(r.components.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| VolioError::io(path, e.into_error()))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_report() {
        let m = MaskVolume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let r = volumetric_report(&m, "e");
        assert_eq!((r.voxels, r.volume_mm3, r.bbox, r.components), (0, 0.0, None, 0));
    }

    #[test]
    fn ten_voxels_anisotropic_volume() {
        let m = MaskVolume::from_fn([10, 3, 3], [0.7, 0.7, 1.25], |_, y, z| y == 1 && z == 1).unwrap();
        let r = volumetric_report(&m, "ten");
        assert_eq!(r.voxels, 10);
        assert_eq!(r.volume_mm3, 10.0 * (0.7 * 0.7 * 1.25));
        assert!((r.volume_mm3 - 6.125).abs() < 1e-12);
        assert_eq!(r.bbox, Some(([0, 1, 1], [9, 1, 1])));
        assert_eq!(r.components, 1);
    }

    #[test]
    fn two_blobs_two_components() {
        let m = MaskVolume::from_fn([8, 8, 8], [1.0; 3], |x, y, z| (x < 2 && y < 2 && z < 2) || (x > 5 && y > 5 && z > 5))
            .unwrap();
        assert_eq!(volumetric_report(&m, "b").components, 2);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let m = MaskVolume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        write_report_csv(&[volumetric_report(&m, "x")], &p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s, format!("{REPORT_HEADER}\nx,0,0,,,,,,,0\n"));
    }
}
