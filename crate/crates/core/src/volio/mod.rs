//! Volumetric images and masks: in-memory types, NIfTI-1 storage and report sheets.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`. Axial
//! slices are fixed-`z` planes of that array.

mod nifti;
mod report;

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_as, NiftiDtype, Orientation};
pub use report::{volumetric_report, write_report_csv, VolumetricReportRow, REPORT_HEADER};

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: {0}")]
    Dimensionality(String),
    #[error("truncated data section: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl VolioError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// What the scalar values of a [`Volume`] represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    Hounsfield,
    /// Values in `[0, 1]` after HU clipping and rescaling.
    Normalized,
    /// Per-voxel foreground probabilities in `[0, 1]`.
    Probability,
}

impl IntensityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hounsfield => "hounsfield",
            Self::Normalized => "normalized",
            Self::Probability => "probability",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hounsfield" => Some(Self::Hounsfield),
            "normalized" => Some(Self::Normalized),
            "probability" => Some(Self::Probability),
            _ => None,
        }
    }
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<(), VolioError> {
    if dims.contains(&0) {
        return Err(VolioError::Invalid(format!("dims {dims:?} must all be >= 1")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolioError::Invalid(format!("spacing {spacing:?} must be positive")));
    }
    let n = dims[0] * dims[1] * dims[2];
    if n != len {
        return Err(VolioError::Invalid(format!("data length {len} != {n} voxels for dims {dims:?}")));
    }
    Ok(())
}

/// Scalar 3D grid with physical spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
    kind: IntensityKind,
    orientation: Option<Orientation>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>, kind: IntensityKind) -> Result<Self, VolioError> {
        check_geometry(dims, spacing, data.len())?;
        if kind != IntensityKind::Hounsfield {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(VolioError::Invalid(format!("{} volume has value {v} outside [0, 1]", kind.as_str())));
            }
        }
        Ok(Self {
            dims,
            spacing,
            data,
            kind,
            orientation: None,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    /// qform/sform block carried over from a file, never interpreted.
    pub fn orientation(&self) -> Option<&Orientation> {
        self.orientation.as_ref()
    }

    pub fn with_orientation(mut self, o: Option<Orientation>) -> Self {
        self.orientation = o;
        self
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Axial plane `z`, rows indexed by y, columns by x.
    pub fn plane(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }
}

/// Binary label grid with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<u8>,
    orientation: Option<Orientation>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self, VolioError> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(VolioError::Invalid(format!("mask value {v} not in {{0, 1}}")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation: None,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolioError> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    /// Builds a mask from a predicate on voxel coordinates.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self, VolioError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn orientation(&self) -> Option<&Orientation> {
        self.orientation.as_ref()
    }

    pub fn with_orientation(mut self, o: Option<Orientation>) -> Self {
        self.orientation = o;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let (nx, ny) = (self.dims[0], self.dims[1]);
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn set_index(&mut self, i: usize, on: bool) {
        self.data[i] = on as u8;
    }

    pub fn plane(&self, z: usize) -> &[u8] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// True when both masks share dims (spacing is not compared).
    pub fn same_grid(&self, other: &MaskVolume) -> bool {
        self.dims == other.dims
    }
}

/// Either kind of volume a NIfTI file can decode to.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Intensity(Volume),
    Mask(MaskVolume),
}

impl AnyVolume {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            Self::Intensity(v) => v.dims(),
            Self::Mask(m) => m.dims(),
        }
    }

    /// Interprets the volume as a mask; intensity volumes must hold only 0/1.
    pub fn into_mask(self) -> Result<MaskVolume, VolioError> {
        match self {
            Self::Mask(m) => Ok(m),
            Self::Intensity(v) => {
                let data = v
                    .data
                    .iter()
                    .map(|&x| {
                        if x == 0.0 {
                            Ok(0)
                        } else if x == 1.0 {
                            Ok(1)
                        } else {
                            Err(VolioError::Invalid(format!("value {x} is not a binary label")))
                        }
                    })
                    .collect::<Result<Vec<u8>, _>>()?;
                Ok(MaskVolume::new(v.dims, v.spacing, data)?.with_orientation(v.orientation))
            }
        }
    }

    /// Interprets the volume as intensities; masks convert to 0.0/1.0 Hounsfield values.
    pub fn into_intensity(self) -> Volume {
        match self {
            Self::Intensity(v) => v,
            Self::Mask(m) => Volume {
                dims: m.dims,
                spacing: m.spacing,
                data: m.data.iter().map(|&v| v as f32).collect(),
                kind: IntensityKind::Hounsfield,
                orientation: m.orientation,
            },
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), VolioError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| VolioError::io(path, io::Error::new(io::ErrorKind::InvalidInput, "no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| VolioError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        VolioError::io(path, e)
    })
}

/// File stem with any `.nii` / `.nii.gz` / `.json` / `.csv` suffix removed.
pub fn scan_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".nii.gz", ".nii", ".json", ".csv", ".mseg"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    name
}

/// NIfTI files (`.nii`, `.nii.gz`) directly inside `dir`, sorted by scan id.
pub fn list_nifti(dir: &Path) -> Result<Vec<(String, PathBuf)>, VolioError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| VolioError::io(dir, e))? {
        let path = entry.map_err(|e| VolioError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_file() && (name.ends_with(".nii") || name.ends_with(".nii.gz")) && !name.starts_with('.') {
            out.push((scan_id(&path), path));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![], IntensityKind::Hounsfield).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0], IntensityKind::Hounsfield).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0], IntensityKind::Hounsfield).is_err());
        assert!(MaskVolume::new([1, 1, 1], [1.0; 3], vec![2]).is_err());
    }

    #[test]
    fn normalized_values_must_be_unit_range() {
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.5], IntensityKind::Normalized).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.5], IntensityKind::Hounsfield).is_ok());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let m = MaskVolume::from_fn([3, 4, 5], [1.0; 3], |x, y, z| (x, y, z) == (2, 1, 3)).unwrap();
        let i = m.data().iter().position(|&v| v == 1).unwrap();
        assert_eq!(i, 2 + 3 * (1 + 4 * 3));
        assert_eq!(m.coords(i), [2, 1, 3]);
    }

    #[test]
    fn scan_id_strips_known_suffixes() {
        assert_eq!(scan_id(Path::new("a/b/case_01.nii.gz")), "case_01");
        assert_eq!(scan_id(Path::new("case_01.nii")), "case_01");
        assert_eq!(scan_id(Path::new("case_01.json")), "case_01");
    }
}
