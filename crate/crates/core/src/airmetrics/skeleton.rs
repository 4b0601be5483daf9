//! Curve-skeleton thinning, branch decomposition and the tree metrics built
//! on them.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use super::MetricsError;
use crate::volio::MaskVolume;

/// Index of `(dx, dy, dz)` in a 3×3×3 neighborhood, offsets in `-1..=1`.
fn cube_index(dx: isize, dy: isize, dz: isize) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

fn cube_offset(i: usize) -> [isize; 3] {
    [(i % 3) as isize - 1, ((i / 3) % 3) as isize - 1, (i / 9) as isize - 1]
}

const CENTER: usize = 13;

struct Tables {
    /// 26-adjacency between neighborhood positions (center excluded).
    adj26: Vec<Vec<usize>>,
    /// 6-adjacency restricted to the 18-neighborhood.
    adj6_n18: Vec<Vec<usize>>,
    in_n18: [bool; 27],
    six: [usize; 6],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let manhattan = |o: [isize; 3]| o[0].abs() + o[1].abs() + o[2].abs();
        let chebyshev = |a: [isize; 3], b: [isize; 3]| (0..3).map(|k| (a[k] - b[k]).abs()).max().unwrap();
        let mut in_n18 = [false; 27];
        for (i, f) in in_n18.iter_mut().enumerate() {
            let m = manhattan(cube_offset(i));
            *f = i != CENTER && m <= 2;
        }
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6_n18 = vec![Vec::new(); 27];
        for i in 0..27 {
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let (a, b) = (cube_offset(i), cube_offset(j));
                if chebyshev(a, b) == 1 {
                    adj26[i].push(j);
                    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                    if manhattan(d) == 1 && in_n18[i] && in_n18[j] {
                        adj6_n18[i].push(j);
                    }
                }
            }
        }
        let six = [
            cube_index(-1, 0, 0),
            cube_index(1, 0, 0),
            cube_index(0, -1, 0),
            cube_index(0, 1, 0),
            cube_index(0, 0, -1),
            cube_index(0, 0, 1),
        ];
        Tables {
            adj26,
            adj6_n18,
            in_n18,
            six,
        }
    })
}

fn count_components(members: &[bool; 27], adj: &[Vec<usize>], seeds: impl Iterator<Item = usize>) -> usize {
    let mut seen = [false; 27];
    let mut stack = Vec::with_capacity(27);
    let mut count = 0;
    for s in seeds {
        if !members[s] || seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if members[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// Deleting the center preserves local topology: its 26-neighborhood holds
/// exactly one 26-connected foreground component, and exactly one
/// 6-connected background component of the 18-neighborhood touches one of
/// its face neighbors.
pub fn is_simple(nb: &[bool; 27]) -> bool {
    let t = tables();
    let mut fg = *nb;
    fg[CENTER] = false;
    if count_components(&fg, &t.adj26, 0..27) != 1 {
        return false;
    }
    let mut bg = [false; 27];
    for i in 0..27 {
        bg[i] = t.in_n18[i] && !nb[i];
    }
    count_components(&bg, &t.adj6_n18, t.six.iter().copied()) == 1
}

/// Padded working grid; outside voxels read as background.
struct Grid {
    dims: [usize; 3],
    /// dims + 2 per axis
    pd: [usize; 3],
    cells: Vec<bool>,
}

impl Grid {
    fn from_mask(m: &MaskVolume) -> Self {
        let dims = m.dims();
        let pd = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
        let mut cells = vec![false; pd[0] * pd[1] * pd[2]];
        for (i, &v) in m.data().iter().enumerate() {
            if v != 0 {
                let [x, y, z] = m.coords(i);
                cells[(x + 1) + pd[0] * ((y + 1) + pd[1] * (z + 1))] = true;
            }
        }
        Self { dims, pd, cells }
    }

    fn stride(&self, o: [isize; 3]) -> isize {
        o[0] + self.pd[0] as isize * (o[1] + self.pd[1] as isize * o[2])
    }

    fn neighborhood(&self, p: usize) -> [bool; 27] {
        let mut nb = [false; 27];
        for (i, v) in nb.iter_mut().enumerate() {
            *v = self.cells[(p as isize + self.stride(cube_offset(i))) as usize];
        }
        nb
    }

    fn to_coords(&self, p: usize) -> [usize; 3] {
        let x = p % self.pd[0];
        let y = (p / self.pd[0]) % self.pd[1];
        let z = p / (self.pd[0] * self.pd[1]);
        [x - 1, y - 1, z - 1]
    }
}

/// One-voxel-wide medial curves of a mask, with 26-adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    dims: [usize; 3],
    spacing: [f64; 3],
    /// Ascending in x-fastest linear order.
    voxels: Vec<[usize; 3]>,
    lookup: HashMap<[usize; 3], usize>,
}

impl Skeleton {
    pub fn from_voxels(dims: [usize; 3], spacing: [f64; 3], mut voxels: Vec<[usize; 3]>) -> Self {
        voxels.sort_by_key(|v| (v[2], v[1], v[0]));
        voxels.dedup();
        let lookup = voxels.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Self {
            dims,
            spacing,
            voxels,
            lookup,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[[usize; 3]] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        self.lookup.contains_key(&v)
    }

    /// Skeleton indices of the 26-neighbors of skeleton voxel `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let [x, y, z] = self.voxels[i];
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if xx < 0 || yy < 0 || zz < 0 {
                        continue;
                    }
                    if let Some(&j) = self.lookup.get(&[xx as usize, yy as usize, zz as usize]) {
                        out.push(j);
                    }
                }
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    /// Voxels with exactly one neighbor.
    pub fn endpoints(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.degree(i) == 1).collect()
    }

    /// 26-connected groups of voxels with degree ≥ 3.
    pub fn junction_clusters(&self) -> Vec<Vec<usize>> {
        let is_junction: Vec<bool> = (0..self.len()).map(|i| self.degree(i) >= 3).collect();
        let mut seen = vec![false; self.len()];
        let mut clusters = Vec::new();
        for s in 0..self.len() {
            if !is_junction[s] || seen[s] {
                continue;
            }
            seen[s] = true;
            let mut stack = vec![s];
            let mut cluster = Vec::new();
            while let Some(i) = stack.pop() {
                cluster.push(i);
                for j in self.neighbors(i) {
                    if is_junction[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            cluster.sort_unstable();
            clusters.push(cluster);
        }
        clusters
    }

    /// Euclidean length in mm of a step between two skeleton voxels.
    pub fn step_length(&self, a: [usize; 3], b: [usize; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (a[k] as f64 - b[k] as f64) * self.spacing[k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Every 26-adjacent voxel pair once, as skeleton indices `(i, j)`, `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in self.neighbors(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn total_length(&self) -> f64 {
        self.edges()
            .iter()
            .map(|&(i, j)| self.step_length(self.voxels[i], self.voxels[j]))
            .sum()
    }

    pub fn to_mask(&self) -> MaskVolume {
        let mut m = MaskVolume::zeros(self.dims, self.spacing).expect("skeleton grid is valid");
        for &[x, y, z] in &self.voxels {
            m.set(x, y, z, true);
        }
        m
    }
}

/// Iterative directional thinning to a curve skeleton. Each pass runs six
/// sub-iterations (one per face direction); a sub-iteration collects border
/// voxels open in that direction that are simple and not curve endpoints,
/// then deletes them one at a time, re-checking each against the current
/// grid. Stops when a full pass deletes nothing.
pub fn skeletonize_3d(m: &MaskVolume) -> Skeleton {
    let t = tables();
    let mut g = Grid::from_mask(m);
    let mut alive: Vec<usize> = (0..g.cells.len()).filter(|&p| g.cells[p]).collect();
    let dirs: Vec<isize> = t.six.iter().map(|&i| g.stride(cube_offset(i))).collect();
    loop {
        let mut deleted_any = false;
        for &d in &dirs {
            let candidates: Vec<usize> = alive
                .iter()
                .copied()
                .filter(|&p| !g.cells[(p as isize + d) as usize])
                .filter(|&p| deletable(&g.neighborhood(p)))
                .collect();
            for p in candidates {
                if deletable(&g.neighborhood(p)) {
                    g.cells[p] = false;
                    deleted_any = true;
                }
            }
            alive.retain(|&p| g.cells[p]);
        }
        if !deleted_any {
            break;
        }
    }
    let voxels = alive.iter().map(|&p| g.to_coords(p)).collect();
    Skeleton::from_voxels(g.dims, m.spacing(), voxels)
}

fn deletable(nb: &[bool; 27]) -> bool {
    let neighbors = nb.iter().enumerate().filter(|&(i, &v)| i != CENTER && v).count();
    neighbors > 1 && is_simple(nb)
}

/// Skeleton path between two nodes (endpoints, junction clusters or a loop's
/// own start), terminal voxels included.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonBranch {
    pub path: Vec<[usize; 3]>,
    pub length_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub branches: Vec<SkeletonBranch>,
    pub endpoints: usize,
    pub junctions: usize,
    /// Length of steps joining voxels of the same junction cluster, which
    /// belong to no branch.
    pub junction_internal_length: f64,
}

/// Splits the skeleton at voxels of degree ≠ 2, with adjacent junction
/// voxels merged into one node. Every skeleton edge ends up in exactly one
/// branch or in `junction_internal_length`.
pub fn branch_decompose(s: &Skeleton) -> Decomposition {
    let n = s.len();
    let nbrs: Vec<Vec<usize>> = (0..n).map(|i| s.neighbors(i)).collect();
    let is_node: Vec<bool> = nbrs.iter().map(|v| v.len() != 2).collect();
    let clusters = s.junction_clusters();
    let mut cluster_of = vec![usize::MAX; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            cluster_of[i] = c;
        }
    }
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut internal = 0.0;
    for (i, nb) in nbrs.iter().enumerate() {
        for &j in nb {
            if i < j && cluster_of[i] != usize::MAX && cluster_of[i] == cluster_of[j] {
                used.insert((i, j));
                internal += s.step_length(s.voxels[i], s.voxels[j]);
            }
        }
    }

    let walk = |start: usize, first: usize, used: &mut HashSet<(usize, usize)>| {
        let mut path = vec![start];
        used.insert(key(start, first));
        let mut cur = first;
        loop {
            path.push(cur);
            if is_node[cur] || cur == start {
                break;
            }
            let Some(&next) = nbrs[cur].iter().find(|&&k| !used.contains(&key(cur, k))) else {
                break;
            };
            used.insert(key(cur, next));
            cur = next;
        }
        path
    };

    let mut branches = Vec::new();
    for i in 0..n {
        if !is_node[i] {
            continue;
        }
        if nbrs[i].is_empty() {
            branches.push(vec![i]);
            continue;
        }
        for &j in &nbrs[i] {
            if !used.contains(&key(i, j)) {
                branches.push(walk(i, j, &mut used));
            }
        }
    }
    // Pure loops without any node.
    for i in 0..n {
        for &j in &nbrs[i] {
            if !used.contains(&key(i, j)) {
                branches.push(walk(i, j, &mut used));
            }
        }
    }

    let branches = branches
        .into_iter()
        .map(|p| {
            let path: Vec<[usize; 3]> = p.iter().map(|&i| s.voxels[i]).collect();
            let length_mm = path.windows(2).map(|w| s.step_length(w[0], w[1])).sum();
            SkeletonBranch { path, length_mm }
        })
        .collect();
    Decomposition {
        branches,
        endpoints: (0..n).filter(|&i| nbrs[i].len() == 1).count(),
        junctions: clusters.len(),
        junction_internal_length: internal,
    }
}

/// Fraction of centerline length whose steps have both ends inside `pred`.
pub fn tree_detected(gt: &Skeleton, pred: &MaskVolume) -> Result<f64, MetricsError> {
    if gt.dims() != pred.dims() {
        return Err(MetricsError::Dims(gt.dims(), pred.dims()));
    }
    let mut total = 0.0;
    let mut inside = 0.0;
    for (i, j) in gt.edges() {
        let (a, b) = (gt.voxels[i], gt.voxels[j]);
        let l = gt.step_length(a, b);
        total += l;
        if pred.get(a[0], a[1], a[2]) && pred.get(b[0], b[1], b[2]) {
            inside += l;
        }
    }
    if total <= 0.0 {
        return Err(MetricsError::EmptyCenterline);
    }
    Ok(inside / total)
}

/// Whether at least `max(1, min_fraction * path_len)` path voxels are in `pred`.
pub fn branch_is_detected(b: &SkeletonBranch, pred: &MaskVolume, min_fraction: f64) -> bool {
    let hits = b.path.iter().filter(|v| pred.get(v[0], v[1], v[2])).count();
    hits as f64 >= (min_fraction * b.path.len() as f64).max(1.0)
}

pub fn branches_detected(branches: &[SkeletonBranch], pred: &MaskVolume, min_fraction: f64) -> Result<f64, MetricsError> {
    if branches.is_empty() {
        return Err(MetricsError::NoBranches);
    }
    let n = branches.iter().filter(|b| branch_is_detected(b, pred, min_fraction)).count();
    Ok(n as f64 / branches.len() as f64)
}
