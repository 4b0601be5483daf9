//! Volume inference and postprocessing: slice-wise 2.5D prediction,
//! stacking, thresholding and largest-component extraction.

use std::collections::VecDeque;

use thiserror::Error;

use crate::medsegnet::{MedSegModel, ModelError};
use crate::prep::{extract_planes, PrepError};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;
use crate::volio::{IntensityKind, MaskVolume, VolioError, Volume};

#[derive(Debug, Error)]
pub enum PostError {
    #[error("connectivity must be 6 or 26, got {0}")]
    Connectivity(u32),
    #[error("expected a normalized volume, got {0:?}")]
    NotNormalized(IntensityKind),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Volume(#[from] VolioError),
}

/// Voxel adjacency for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self, PostError> {
        match n {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            other => Err(PostError::Connectivity(other)),
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Self::Six => manhattan == 1,
                        Self::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Per-voxel component labels; 0 is background, components are `1..=K` in
/// first-encounter scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
    /// `sizes[k - 1]` is the voxel count of component `k`.
    pub sizes: Vec<usize>,
}

impl LabelField {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Labels foreground components by breadth-first flooding in x-fastest scan order.
pub fn connected_components(m: &MaskVolume, conn: Connectivity) -> LabelField {
    let [nx, ny, nz] = m.dims();
    let offsets = conn.offsets();
    let data = m.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = m.coords(i);
            for d in &offsets {
                let (xx, yy, zz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                    continue;
                }
                let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                if data[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    LabelField {
        dims: m.dims(),
        labels,
        sizes,
    }
}

/// Keeps only the largest component. Ties go to the component whose first
/// voxel comes earliest in scan order, i.e. the smallest label.
pub fn largest_component(m: &MaskVolume, conn: Connectivity) -> MaskVolume {
    let field = connected_components(m, conn);
    let Some(best) = field
        .sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k as u32 + 1)
    else {
        return m.clone();
    };
    let data = field.labels.iter().map(|&l| (l == best) as u8).collect();
    MaskVolume::new(m.dims(), m.spacing(), data)
        .expect("labels come from a valid mask")
        .with_orientation(m.orientation().copied())
}

/// `voxel = 1` iff `p >= t`.
pub fn threshold(p: &Volume, t: f32) -> MaskVolume {
    let data = p.data().iter().map(|&v| (v >= t) as u8).collect();
    MaskVolume::new(p.dims(), p.spacing(), data)
        .expect("geometry comes from a valid volume")
        .with_orientation(p.orientation().copied())
}

/// Runs the model on every axial 2.5D slice at full resolution and stacks
/// the probability planes into a volume of the input's shape.
pub fn predict_volume<T: Scalar>(model: &MedSegModel<T>, v: &Volume) -> Result<Volume, PostError> {
    if v.kind() != IntensityKind::Normalized {
        return Err(PostError::NotNormalized(v.kind()));
    }
    let [nx, ny, nz] = v.dims();
    let plane = nx * ny;
    let mut out = vec![0f32; plane * nz];
    for z in 0..nz {
        let channels = extract_planes(v, z)?;
        let x = Tensor::new(vec![1, 3, ny, nx], channels.iter().map(|&c| T::lit(c as f64)).collect())
            .expect("plane sizes match");
        let prob = model.predict(&x)?;
        for (o, p) in out[z * plane..(z + 1) * plane].iter_mut().zip(prob.data()) {
            *o = (p.as_f64() as f32).clamp(0.0, 1.0);
        }
    }
    Ok(Volume::new(v.dims(), v.spacing(), out, IntensityKind::Probability)?.with_orientation(v.orientation().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> MaskVolume {
        MaskVolume::from_fn(dims, [1.0; 3], |x, y, z| on.contains(&[x, y, z])).unwrap()
    }

    #[test]
    fn diagonal_voxels_depend_on_connectivity() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = MaskVolume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 0);
        assert_eq!(largest_component(&m, Connectivity::TwentySix), m);
    }

    #[test]
    fn invalid_connectivity_rejected() {
        assert!(matches!(Connectivity::from_count(18), Err(PostError::Connectivity(18))));
    }

    #[test]
    fn keeps_bigger_blob() {
        let m = MaskVolume::from_fn([20, 3, 3], [1.0; 3], |x, y, z| y == 1 && z == 1 && (x < 10 || (12..17).contains(&x)))
            .unwrap();
        let l = largest_component(&m, Connectivity::TwentySix);
        assert_eq!(l.count(), 10);
        assert!(l.get(0, 1, 1) && !l.get(12, 1, 1));
    }

    #[test]
    fn tie_goes_to_earliest_component() {
        let m = MaskVolume::from_fn([12, 3, 3], [1.0; 3], |x, y, z| y == 1 && z == 1 && (x < 4 || (6..10).contains(&x)))
            .unwrap();
        let l = largest_component(&m, Connectivity::TwentySix);
        assert!(l.get(0, 1, 1) && !l.get(6, 1, 1));
    }

    #[test]
    fn threshold_is_inclusive() {
        let p = Volume::new([3, 1, 1], [1.0; 3], vec![0.49, 0.5, 0.9], IntensityKind::Probability).unwrap();
        assert_eq!(threshold(&p, 0.5).data(), &[0, 1, 1]);
        assert_eq!(threshold(&p, 0.95).count(), 0);
    }
}
