//! Independent reference implementations used by the property tests.

#![allow(dead_code)]

use airseg_core::volio::MaskVolume;

/// Number of foreground components under 26- or 6-adjacency, by union-find
/// over the raw voxel grid.
pub fn component_count(m: &MaskVolume, full: bool) -> usize {
    let [nx, ny, nz] = m.dims();
    let mut parent: Vec<usize> = (0..m.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let manhattan = dx.abs() + dy.abs() + dz.abs();
                            if manhattan == 0 || (!full && manhattan > 1) {
                                continue;
                            }
                            let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                                continue;
                            }
                            let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                            if m.get(xx, yy, zz) {
                                let a = find(&mut parent, m.index(x, y, z));
                                let b = find(&mut parent, m.index(xx, yy, zz));
                                parent[a] = b;
                            }
                        }
                    }
                }
            }
        }
    }
    (0..m.len()).filter(|&i| m.data()[i] != 0 && find(&mut parent, i) == i).count()
}

/// Whether some 2×2×2 cube is entirely foreground.
pub fn has_full_cube(m: &MaskVolume) -> bool {
    let [nx, ny, nz] = m.dims();
    for z in 0..nz.saturating_sub(1) {
        for y in 0..ny.saturating_sub(1) {
            for x in 0..nx.saturating_sub(1) {
                let all = (0..8).all(|k| m.get(x + (k & 1), y + ((k >> 1) & 1), z + ((k >> 2) & 1)));
                if all {
                    return true;
                }
            }
        }
    }
    false
}

pub fn is_subset(a: &MaskVolume, b: &MaskVolume) -> bool {
    a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0 || y != 0)
}

/// Straight cylinder of radius `r` along z, `length` voxels long, centred in an
/// in-plane grid of side `side`.
pub fn cylinder(side: usize, length: usize, r: f64) -> MaskVolume {
    let c = (side as f64 - 1.0) / 2.0;
    let pad = 3;
    MaskVolume::from_fn([side, side, length + 2 * pad], [1.0; 3], |x, y, z| {
        let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
        z >= pad && z < pad + length && d2 <= r * r
    })
    .expect("valid grid")
}
