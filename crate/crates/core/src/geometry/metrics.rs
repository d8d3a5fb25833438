//! Chamfer distance and voxel IoU.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::mesh::{bounds, Mesh, Vec3};
use crate::error::{Error, Result};

/// Symmetric-mean Chamfer distances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    /// Meters.
    pub l1: f64,
    /// Square meters.
    pub l2: f64,
}

/// For every point of `from`, the index of and squared distance to its
/// nearest point in `to` (lowest index on ties).
pub fn nearest_neighbors(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<Chamfer> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty point set"));
    }
    let ab = nearest_neighbors(a, b);
    let ba = nearest_neighbors(b, a);
    let mean = |v: &[(usize, f64)], f: fn(f64) -> f64| v.iter().map(|(_, d)| f(*d)).sum::<f64>() / v.len() as f64;
    Ok(Chamfer {
        l1: 0.5 * (mean(&ab, f64::sqrt) + mean(&ba, f64::sqrt)),
        l2: 0.5 * (mean(&ab, |d| d) + mean(&ba, |d| d)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou: f64,
    /// At least one mesh was not watertight and was scored by its surface shell.
    pub shell_fallback: bool,
}

pub const DEFAULT_IOU_RESOLUTION: usize = 64;

struct Grid {
    origin: Vec3,
    h: f64,
    dims: [usize; 3],
}

impl Grid {
    fn cell(&self, p: &Vec3) -> [usize; 3] {
        let mut c = [0; 3];
        for a in 0..3 {
            let i = ((p[a] - self.origin[a]) / self.h).floor();
            c[a] = (i.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Occupied voxels of one mesh: rasterized surface, plus interior when watertight.
fn occupancy(mesh: &Mesh, grid: &Grid) -> (Vec<bool>, bool) {
    let mut occ = vec![false; grid.len()];
    let v = mesh.vertices();
    // Surface points at most h/3 apart mark every voxel the surface crosses.
    let spacing = grid.h / 3.0;
    for f in mesh.faces() {
        let (a, b, c) = (v[f[0]], v[f[1]], v[f[2]]);
        let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
        let n = (longest / spacing).ceil().max(1.0) as usize;
        for i in 0..=n {
            for j in 0..=n - i {
                let (u, w) = (i as f64 / n as f64, j as f64 / n as f64);
                let p = a + (b - a) * u + (c - a) * w;
                occ[grid.flat(grid.cell(&p))] = true;
            }
        }
    }
    if !mesh.is_watertight() {
        return (occ, true);
    }
    // Exterior flood fill from a padding corner; everything unreached is solid.
    let mut outside = vec![false; grid.len()];
    let mut queue = VecDeque::from([[0usize, 0, 0]]);
    outside[0] = true;
    while let Some(c) = queue.pop_front() {
        for a in 0..3 {
            for step in [-1i64, 1] {
                let x = c[a] as i64 + step;
                if x < 0 || x >= grid.dims[a] as i64 {
                    continue;
                }
                let mut nb = c;
                nb[a] = x as usize;
                let idx = grid.flat(nb);
                if !occ[idx] && !outside[idx] {
                    outside[idx] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    (outside.into_iter().map(|o| !o).collect(), false)
}

/// Volumetric IoU of two meshes voxelized on their shared bounding grid.
/// `resolution` is the voxel count along the longest bounding-box axis.
pub fn voxel_iou(a: &Mesh, b: &Mesh, resolution: usize) -> Result<IouReport> {
    if resolution < 8 {
        return Err(Error::invalid(format!("voxel resolution must be at least 8, got {resolution}")));
    }
    let (lo_a, hi_a) = a.bounds();
    let (lo_b, hi_b) = b.bounds();
    let (lo, hi) = bounds(&[lo_a, hi_a, lo_b, hi_b]);
    let extent = (hi - lo).max();
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::invalid("meshes have a degenerate bounding box"));
    }
    let h = extent / resolution as f64;
    // One voxel of padding on each side keeps the exterior connected.
    let dims = [0, 1, 2].map(|ax| ((hi[ax] - lo[ax]) / h).ceil().max(1.0) as usize + 2);
    let grid = Grid { origin: lo - Vec3::repeat(h), h, dims };
    let (oa, fa) = occupancy(a, &grid);
    let (ob, fb) = occupancy(b, &grid);
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in oa.iter().zip(&ob) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(IouReport { iou, shell_fallback: fa || fb })
}
