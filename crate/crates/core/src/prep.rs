//! Training representation: HU clipping and normalization, annotated 2.5D
//! axial slices, random-crop augmentation and the seeded train/val split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{atomic_write, IntensityKind, MaskVolume, VolioError, Volume};

/// Default HU clipping window.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 600.0;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("expected a {expected} volume, got {got}")]
    Kind { expected: &'static str, got: &'static str },
    #[error("slice index {z} out of range for depth {nz}")]
    SliceOutOfRange { z: usize, nz: usize },
    #[error("volume dims {volume:?} do not match mask dims {mask:?}")]
    DimsMismatch { volume: [usize; 3], mask: [usize; 3] },
    #[error("scan id list is empty")]
    EmptyIds,
    #[error("fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("invalid clip window [{0}, {1}]")]
    ClipWindow(f32, f32),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] VolioError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// `(clamp(v, -1024, 600) + 1024) / 1624`, elementwise.
pub fn clip_normalize(v: &Volume) -> Result<Volume, PrepError> {
    clip_normalize_window(v, HU_MIN, HU_MAX)
}

pub fn clip_normalize_window(v: &Volume, lo: f32, hi: f32) -> Result<Volume, PrepError> {
    if v.kind() != IntensityKind::Hounsfield {
        return Err(PrepError::Kind {
            expected: "hounsfield",
            got: v.kind().as_str(),
        });
    }
    if !(lo < hi) {
        return Err(PrepError::ClipWindow(lo, hi));
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data()
        .iter()
        .map(|&x| ((x.clamp(lo, hi) as f64 - lo64) / span) as f32)
        .collect();
    Ok(Volume::new(v.dims(), v.spacing(), data, IntensityKind::Normalized)?.with_orientation(v.orientation().copied()))
}

/// Ascending `z` whose axial label plane has at least one foreground voxel.
pub fn annotated_z_indices(m: &MaskVolume) -> Vec<usize> {
    (0..m.dims()[2]).filter(|&z| m.plane(z).iter().any(|&v| v != 0)).collect()
}

/// Three stacked normalized planes `(z-1, z, z+1)` with boundary replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice25D {
    /// In-plane size `(H, W)` = `(ny, nx)`.
    pub height: usize,
    pub width: usize,
    /// `3 * H * W` values, channel-major.
    pub channels: Vec<f32>,
    /// `H * W` labels of plane `z`.
    pub label: Vec<u8>,
    pub scan_id: String,
    pub z: usize,
}

impl Slice25D {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.channels[c * n..(c + 1) * n]
    }
}

/// The three input planes of slice `z`, channel-major, without a label.
pub fn extract_planes(v: &Volume, z: usize) -> Result<Vec<f32>, PrepError> {
    let nz = v.dims()[2];
    if z >= nz {
        return Err(PrepError::SliceOutOfRange { z, nz });
    }
    let below = z.saturating_sub(1);
    let above = (z + 1).min(nz - 1);
    let mut out = Vec::with_capacity(3 * v.plane(z).len());
    for zz in [below, z, above] {
        out.extend_from_slice(v.plane(zz));
    }
    Ok(out)
}

pub fn extract_25d(v: &Volume, m: &MaskVolume, scan_id: &str, z: usize) -> Result<Slice25D, PrepError> {
    if v.kind() != IntensityKind::Normalized {
        return Err(PrepError::Kind {
            expected: "normalized",
            got: v.kind().as_str(),
        });
    }
    if v.dims() != m.dims() {
        return Err(PrepError::DimsMismatch {
            volume: v.dims(),
            mask: m.dims(),
        });
    }
    let channels = extract_planes(v, z)?;
    let [nx, ny, _] = v.dims();
    Ok(Slice25D {
        height: ny,
        width: nx,
        channels,
        label: m.plane(z).to_vec(),
        scan_id: scan_id.to_string(),
        z,
    })
}

/// Random `size × size` window. Axes shorter than `size` are first
/// zero-padded symmetrically (extra pixel after); channels and label share
/// the drawn origin.
pub fn random_crop<R: Rng + ?Sized>(s: &Slice25D, size: usize, rng: &mut R) -> Slice25D {
    let (ph, pad_top) = padded(s.height, size);
    let (pw, pad_left) = padded(s.width, size);
    let oy = rng.gen_range(0..=ph - size);
    let ox = rng.gen_range(0..=pw - size);
    crop_at(s, size, (oy, ox), (pad_top, pad_left))
}

fn padded(n: usize, size: usize) -> (usize, usize) {
    if n >= size {
        (n, 0)
    } else {
        (size, (size - n) / 2)
    }
}

/// Window of the padded slice with top-left corner `origin` (padded coordinates).
pub fn crop_at(s: &Slice25D, size: usize, origin: (usize, usize), pad: (usize, usize)) -> Slice25D {
    let plane = s.height * s.width;
    let mut channels = vec![0f32; 3 * size * size];
    let mut label = vec![0u8; size * size];
    for y in 0..size {
        let sy = (origin.0 + y) as isize - pad.0 as isize;
        if sy < 0 || sy >= s.height as isize {
            continue;
        }
        for x in 0..size {
            let sx = (origin.1 + x) as isize - pad.1 as isize;
            if sx < 0 || sx >= s.width as isize {
                continue;
            }
            let src = sy as usize * s.width + sx as usize;
            for c in 0..3 {
                channels[c * size * size + y * size + x] = s.channels[c * plane + src];
            }
            label[y * size + x] = s.label[src];
        }
    }
    Slice25D {
        height: size,
        width: size,
        channels,
        label,
        scan_id: s.scan_id.clone(),
        z: s.z,
    }
}

/// Seeded shuffle; the first `ceil(fraction * n)` ids go to validation.
/// Both returned lists are sorted.
pub fn split_scans(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>), PrepError> {
    if ids.is_empty() {
        return Err(PrepError::EmptyIds);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PrepError::Fraction(fraction));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    // Guard against products like 0.2 * 10 landing a hair above an integer.
    let n_val = ((fraction * ids.len() as f64) - 1e-9).ceil() as usize;
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort();
    train.sort();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    InternalVal,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::InternalVal => "internal_val",
        })
    }
}

impl FromStr for Split {
    type Err = PrepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "internal_val" => Ok(Split::InternalVal),
            other => Err(PrepError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub z: usize,
    pub split: Split,
}

/// Annotated slices of every scan, tagged with their split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Splits the scans with [`split_scans`] and lists every annotated `z`,
    /// ordered by scan id then `z`.
    pub fn build(masks: &[(String, &MaskVolume)], fraction: f64, seed: u64) -> Result<Self, PrepError> {
        let ids: Vec<String> = masks.iter().map(|(id, _)| id.clone()).collect();
        let (_, val) = split_scans(&ids, fraction, seed)?;
        let mut sorted: Vec<&(String, &MaskVolume)> = masks.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries = Vec::new();
        for (id, m) in sorted {
            let split = if val.contains(id) { Split::InternalVal } else { Split::Train };
            entries.extend(annotated_z_indices(m).into_iter().map(|z| ManifestEntry {
                scan_id: id.clone(),
                z,
                split,
            }));
        }
        Ok(Self { entries, seed })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct scan ids in entry order.
    pub fn scan_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if ids.last() != Some(&e.scan_id) && !ids.contains(&e.scan_id) {
                ids.push(e.scan_id.clone());
            }
        }
        ids
    }

    /// CSV with header `scan_id,z,split`, LF line endings.
    pub fn to_csv(&self) -> Result<Vec<u8>, PrepError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["scan_id", "z", "split"])?;
        for e in &self.entries {
            w.write_record([e.scan_id.clone(), e.z.to_string(), e.split.to_string()])?;
        }
        w.into_inner().map_err(|e| PrepError::Manifest(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PrepError> {
        Ok(atomic_write(path, &self.to_csv()?)?)
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self, PrepError> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != ["scan_id", "z", "split"] {
            return Err(PrepError::Manifest(format!("unexpected header in {}", path.display())));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let z = rec[1]
                .parse()
                .map_err(|_| PrepError::Manifest(format!("bad z `{}`", &rec[1])))?;
            entries.push(ManifestEntry {
                scan_id: rec[0].to_string(),
                z,
                split: rec[2].parse()?,
            });
        }
        Ok(Self { entries, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new([n, 1, 1], [1.0; 3], values, IntensityKind::Hounsfield).unwrap()
    }

    #[test]
    fn clip_normalize_reference_points() {
        let out = clip_normalize(&hu(vec![-2000.0, -1024.0, -212.0, 600.0, 1000.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
        assert_eq!(out.kind(), IntensityKind::Normalized);
    }

    #[test]
    fn clip_normalize_rejects_normalized_input() {
        let once = clip_normalize(&hu(vec![0.0])).unwrap();
        assert!(matches!(clip_normalize(&once), Err(PrepError::Kind { .. })));
    }

    #[test]
    fn annotated_planes() {
        let empty = MaskVolume::zeros([3, 3, 10], [1.0; 3]).unwrap();
        assert!(annotated_z_indices(&empty).is_empty());
        let one = MaskVolume::from_fn([3, 3, 10], [1.0; 3], |x, y, z| (x, y, z) == (1, 2, 5)).unwrap();
        assert_eq!(annotated_z_indices(&one), vec![5]);
    }

    fn ramp_volume(nz: usize) -> (Volume, MaskVolume) {
        let data = (0..4 * nz).map(|i| (i / 4) as f32 / nz as f32).collect();
        let v = Volume::new([2, 2, nz], [1.0; 3], data, IntensityKind::Normalized).unwrap();
        let m = MaskVolume::from_fn([2, 2, nz], [1.0; 3], |x, _, z| x == z % 2).unwrap();
        (v, m)
    }

    #[test]
    fn boundary_planes_are_replicated() {
        let (v, m) = ramp_volume(5);
        let s = extract_25d(&v, &m, "r", 0).unwrap();
        assert_eq!((s.channel(0), s.channel(1), s.channel(2)), (v.plane(0), v.plane(0), v.plane(1)));
        let s = extract_25d(&v, &m, "r", 4).unwrap();
        assert_eq!((s.channel(0), s.channel(1), s.channel(2)), (v.plane(3), v.plane(4), v.plane(4)));
        let s = extract_25d(&v, &m, "r", 2).unwrap();
        assert_eq!((s.channel(0), s.channel(1), s.channel(2)), (v.plane(1), v.plane(2), v.plane(3)));
        assert_eq!(s.label, m.plane(2));
        assert!(matches!(extract_25d(&v, &m, "r", 5), Err(PrepError::SliceOutOfRange { z: 5, nz: 5 })));
    }

    #[test]
    fn split_counts() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i:02}")).collect();
        let (train, val) = split_scans(&ids, 0.2, 7).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<String> = train.iter().chain(&val).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(split_scans(&ids, 0.2, 7).unwrap(), (train, val));

        let ids: Vec<String> = (0..299).map(|i| format!("s{i:03}")).collect();
        let (train, val) = split_scans(&ids, 0.2, 1).unwrap();
        assert_eq!((val.len(), train.len()), (60, 239));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_scans(&[], 0.2, 0), Err(PrepError::EmptyIds)));
        assert!(matches!(split_scans(&["a".into()], 1.0, 0), Err(PrepError::Fraction(_))));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let (_, m) = ramp_volume(4);
        let masks = vec![("a".to_string(), &m), ("b".to_string(), &m)];
        let man = DatasetManifest::build(&masks, 0.5, 3).unwrap();
        assert_eq!(man.entries.len(), 8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        man.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("scan_id,z,split\n"));
        assert_eq!(DatasetManifest::read_csv(&p, 3).unwrap(), man);
    }
}
