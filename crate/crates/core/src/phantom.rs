//! Synthetic bifurcating airway trees with exact ground truth: a union of
//! capsules rasterized on a voxel grid, the generating centerline segments,
//! and a paired grayscale volume in Hounsfield units.

use std::path::Path;

use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{atomic_write, IntensityKind, MaskVolume, VolioError, Volume};

pub const LUMEN_HU: f32 = -1000.0;
pub const BACKGROUND_HU: f32 = 50.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("degenerate capsule: p0 = p1 with radius {0}")]
    Degenerate(f64),
    #[error("branch {branch} leaves the grid (endpoint {point:?}, radius {radius})")]
    OutOfBounds { branch: usize, point: [f64; 3], radius: f64 },
    #[error(transparent)]
    Volume(#[from] VolioError),
    #[error("truth json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parameters of one phantom. Positions, lengths and radii are in voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub root_start: [f64; 3],
    pub root_direction: [f64; 3],
    pub root_radius: f64,
    /// Radius factor per generation.
    pub radius_decay: f64,
    /// Length of the root segment.
    pub segment_length: f64,
    /// Length factor per generation.
    pub length_decay: f64,
    pub half_angle_deg: f64,
    /// Maximum absolute angle jitter added to each child.
    pub jitter_deg: f64,
    /// Number of generations.
    pub depth: usize,
    pub seed: u64,
    /// Uniform noise amplitude as a fraction of the lumen/background contrast.
    pub noise_level: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 64],
            spacing: [1.0, 1.0, 1.0],
            root_start: [24.0, 24.0, 4.0],
            root_direction: [0.0, 0.0, 1.0],
            root_radius: 4.0,
            radius_decay: 0.75,
            segment_length: 20.0,
            length_decay: 1.0,
            half_angle_deg: 30.0,
            jitter_deg: 4.0,
            depth: 3,
            seed: 0,
            noise_level: 0.1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Spec(m));
        if self.dims.contains(&0) {
            return bad(format!("dims must be >= 1, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.depth > 12 {
            return bad(format!("depth {} is too large", self.depth));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return bad(format!("radius_decay must be in (0, 1], got {}", self.radius_decay));
        }
        if !(self.length_decay > 0.0 && self.length_decay.is_finite()) {
            return bad(format!("length_decay must be positive, got {}", self.length_decay));
        }
        if !(self.segment_length > 0.0 && self.segment_length.is_finite()) {
            return bad(format!("segment_length must be positive, got {}", self.segment_length));
        }
        if !(self.half_angle_deg > 0.0 && self.half_angle_deg < 90.0) {
            return bad(format!("half_angle_deg must be in (0, 90), got {}", self.half_angle_deg));
        }
        if !(self.jitter_deg >= 0.0 && self.jitter_deg < self.half_angle_deg) {
            return bad(format!("jitter_deg must be in [0, half_angle_deg), got {}", self.jitter_deg));
        }
        if !(0.0..0.5).contains(&self.noise_level) {
            return bad(format!("noise_level must be in [0, 0.5), got {}", self.noise_level));
        }
        if norm(self.root_direction) == 0.0 || self.root_direction.iter().any(|v| !v.is_finite()) {
            return bad("root_direction must be a non-zero vector".into());
        }
        let leaf_radius = self.root_radius * self.radius_decay.powi(self.depth as i32 - 1);
        if !(leaf_radius >= 1.0) {
            return bad(format!("radius at the deepest generation is {leaf_radius:.3}, must be >= 1 voxel"));
        }
        Ok(())
    }
}

/// One generating segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: usize,
    pub parent: Option<usize>,
    pub generation: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub length_mm: f64,
}

/// JSON-serializable part of the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: PhantomSpec,
    pub branches: Vec<Branch>,
    /// Centerline per branch in voxel coordinates.
    pub polylines: Vec<Vec<[f64; 3]>>,
    /// Bifurcation points in voxel coordinates.
    pub junctions: Vec<[f64; 3]>,
    pub total_length_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub mask: MaskVolume,
    /// Hounsfield units.
    pub volume: Volume,
    pub record: TruthRecord,
}

impl PhantomTruth {
    pub fn leaves(&self) -> usize {
        let n = self.record.branches.len();
        n - self.record.junctions.len()
    }

    pub fn to_json(&self) -> Result<Vec<u8>, PhantomError> {
        let mut s = serde_json::to_vec_pretty(&self.record)?;
        s.push(b'\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), PhantomError> {
        Ok(atomic_write(path, &self.to_json()?)?)
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    norm(sub(p, add(a, scale(ab, t))))
}

/// Approximate minimum distance between two segments by dense sampling.
fn segment_distance(a0: [f64; 3], a1: [f64; 3], b0: [f64; 3], b1: [f64; 3]) -> f64 {
    const STEPS: usize = 64;
    (0..=STEPS)
        .map(|i| {
            let t = i as f64 / STEPS as f64;
            let p = add(a0, scale(sub(a1, a0), t));
            point_segment_distance(p, b0, b1)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Linear indices (x fastest) of voxel centers within distance `r` of the
/// segment `[p0, p1]`, ascending.
pub fn rasterize_capsule(dims: [usize; 3], p0: [f64; 3], p1: [f64; 3], r: f64) -> Result<Vec<usize>, PhantomError> {
    if !r.is_finite() || r < 0.0 || (p0 == p1 && r <= 0.0) {
        return Err(PhantomError::Degenerate(r));
    }
    let [nx, ny, _] = dims;
    let range = |a: usize| {
        let lo = (p0[a].min(p1[a]) - r).ceil().max(0.0);
        let hi = (p0[a].max(p1[a]) + r).floor().min(dims[a] as f64 - 1.0);
        (lo as isize, hi as isize)
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let (z0, z1) = range(2);
    if x0 > x1 || y0 > y1 || z0 > z1 {
        return Ok(Vec::new());
    }
    let out = (z0..=z1)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut plane = Vec::new();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64, y as f64, z as f64];
                    if point_segment_distance(p, p0, p1) <= r {
                        plane.push(x as usize + nx * (y as usize + ny * z as usize));
                    }
                }
            }
            plane
        })
        .collect();
    Ok(out)
}

struct Grow<'a> {
    spec: &'a PhantomSpec,
    rng: Xoshiro256PlusPlus,
    branches: Vec<Branch>,
}

impl Grow<'_> {
    fn segment_mm(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        let d = sub(b, a);
        let s = self.spec.spacing;
        norm([d[0] * s[0], d[1] * s[1], d[2] * s[2]])
    }

    /// Depth-first: branch, then first child subtree, then second.
    fn grow(&mut self, parent: Option<usize>, generation: usize, start: [f64; 3], dir: [f64; 3], plane: [f64; 3]) {
        let s = self.spec;
        let length = s.segment_length * s.length_decay.powi(generation as i32);
        let radius = s.root_radius * s.radius_decay.powi(generation as i32);
        let end = add(start, scale(dir, length));
        let id = self.branches.len();
        self.branches.push(Branch {
            id,
            parent,
            generation,
            start,
            end,
            radius,
            length_mm: self.segment_mm(start, end),
        });
        if generation + 1 >= s.depth {
            return;
        }
        let next_plane = unit(cross(dir, plane));
        for sign in [1.0, -1.0] {
            let jitter = if s.jitter_deg > 0.0 {
                self.rng.gen_range(-s.jitter_deg..=s.jitter_deg)
            } else {
                0.0
            };
            let theta = (s.half_angle_deg + jitter).to_radians();
            let child = unit(add(scale(dir, theta.cos()), scale(plane, sign * theta.sin())));
            self.grow(Some(id), generation + 1, end, child, next_plane);
        }
    }
}

fn initial_plane(dir: [f64; 3]) -> [f64; 3] {
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let least = axes
        .into_iter()
        .min_by(|a, b| dot(*a, dir).abs().total_cmp(&dot(*b, dir).abs()))
        .expect("three axes");
    unit(sub(least, scale(dir, dot(least, dir))))
}

/// Builds the tree, rasterizes it and renders the grayscale volume.
pub fn generate_tree(spec: &PhantomSpec) -> Result<PhantomTruth, PhantomError> {
    spec.validate()?;
    let dir = unit(spec.root_direction);
    let mut g = Grow {
        spec,
        rng: Xoshiro256PlusPlus::seed_from_u64(spec.seed),
        branches: Vec::new(),
    };
    g.grow(None, 0, spec.root_start, dir, initial_plane(dir));
    let mut noise_rng = g.rng.clone();
    noise_rng.jump();
    let branches = g.branches;

    for b in &branches {
        for p in [b.start, b.end] {
            let inside = (0..3).all(|a| p[a] - b.radius >= 0.0 && p[a] + b.radius <= (spec.dims[a] - 1) as f64);
            if !inside {
                return Err(PhantomError::OutOfBounds {
                    branch: b.id,
                    point: p,
                    radius: b.radius,
                });
            }
        }
    }

    let mut mask = MaskVolume::zeros(spec.dims, spec.spacing)?;
    for b in &branches {
        for i in rasterize_capsule(spec.dims, b.start, b.end, b.radius)? {
            mask.set_index(i, true);
        }
    }

    let amplitude = spec.noise_level * (BACKGROUND_HU - LUMEN_HU) as f64;
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            let base = if m != 0 { LUMEN_HU } else { BACKGROUND_HU };
            let n = if amplitude > 0.0 {
                noise_rng.gen_range(-amplitude..=amplitude)
            } else {
                0.0
            };
            base + n as f32
        })
        .collect();
    let volume = Volume::new(spec.dims, spec.spacing, data, IntensityKind::Hounsfield)?;

    let junctions = branches
        .iter()
        .filter(|b| b.generation + 1 < spec.depth)
        .map(|b| b.end)
        .collect();
    let record = TruthRecord {
        spec: spec.clone(),
        polylines: branches.iter().map(|b| vec![b.start, b.end]).collect(),
        total_length_mm: branches.iter().map(|b| b.length_mm).sum(),
        junctions,
        branches,
    };
    Ok(PhantomTruth { mask, volume, record })
}

/// Pairs of branches that neither share an endpoint nor stay apart by more
/// than the sum of their radii.
pub fn overlapping_branches(record: &TruthRecord) -> Vec<(usize, usize)> {
    let bs = &record.branches;
    let mut out = Vec::new();
    for i in 0..bs.len() {
        for j in i + 1..bs.len() {
            let (a, b) = (&bs[i], &bs[j]);
            let adjacent = b.parent == Some(a.id) || a.parent == Some(b.id) || (a.parent.is_some() && a.parent == b.parent);
            if adjacent {
                continue;
            }
            if segment_distance(a.start, a.end, b.start, b.end) <= a.radius + b.radius {
                out.push((a.id, b.id));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ball_has_seven_voxels() {
        let v = rasterize_capsule([5, 5, 5], [2.0; 3], [2.0; 3], 1.0).unwrap();
        assert_eq!(v.len(), 7);
        assert!(matches!(
            rasterize_capsule([5, 5, 5], [2.0; 3], [2.0; 3], 0.0),
            Err(PhantomError::Degenerate(_))
        ));
    }

    #[test]
    fn capsule_volume_close_to_analytic() {
        let r = 3.0;
        let v = rasterize_capsule([20, 20, 60], [10.0, 10.0, 10.0], [10.0, 10.0, 50.0], r).unwrap();
        let analytic = std::f64::consts::PI * r * r * 40.0 + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((v.len() as f64 - analytic).abs() / analytic < 0.10, "{} vs {analytic}", v.len());
    }

    #[test]
    fn thin_line_contains_nearest_points() {
        let (p0, p1) = ([1.0, 1.0, 1.0], [15.0, 8.0, 4.0]);
        let v = rasterize_capsule([17, 10, 6], p0, p1, 0.5).unwrap();
        for i in 0..=56 {
            let t = i as f64 / 56.0;
            let p = add(p0, scale(sub(p1, p0), t));
            let q = [p[0].round(), p[1].round(), p[2].round()];
            if point_segment_distance(q, p0, p1) <= 0.5 {
                let idx = q[0] as usize + 17 * (q[1] as usize + 10 * q[2] as usize);
                assert!(v.contains(&idx));
            }
        }
    }

    #[test]
    fn branch_counts_and_lengths() {
        for depth in 1..=3 {
            let spec = PhantomSpec {
                depth,
                radius_decay: 1.0,
                root_radius: 2.0,
                ..Default::default()
            };
            let t = generate_tree(&spec).unwrap();
            assert_eq!(t.record.branches.len(), (1 << depth) - 1);
            assert_eq!(t.record.junctions.len(), (1 << (depth - 1)) - 1);
            assert!((t.record.total_length_mm - 20.0 * ((1 << depth) - 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn centerline_inside_mask_and_deterministic() {
        let spec = PhantomSpec {
            seed: 5,
            ..Default::default()
        };
        let a = generate_tree(&spec).unwrap();
        let b = generate_tree(&spec).unwrap();
        assert_eq!(a, b);
        assert!(overlapping_branches(&a.record).is_empty());
        for b in &a.record.branches {
            for i in 0..=20 {
                let p = add(b.start, scale(sub(b.end, b.start), i as f64 / 20.0));
                assert!(a.mask.get(p[0].round() as usize, p[1].round() as usize, p[2].round() as usize));
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = [
            PhantomSpec { depth: 0, ..Default::default() },
            PhantomSpec { noise_level: 0.5, ..Default::default() },
            PhantomSpec { root_radius: 1.5, ..Default::default() },
            PhantomSpec {
                segment_length: 80.0,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(generate_tree(&s).is_err(), "{s:?}");
        }
    }
}
