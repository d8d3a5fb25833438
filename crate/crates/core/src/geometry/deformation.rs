//! Per-sample deformation fields: transfer from frame pairs and mesh driving.

use serde::{Deserialize, Serialize};

use super::dualquat::{blend, fit_dualquat, DualQuat};
use super::mesh::Vec3;
use super::sampling::SurfaceSamples;
use crate::error::{Error, Result};

/// Neighbourhood size for the local rigid fits behind dual-quaternion targets.
pub const K_NBR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformationMode {
    Displacement,
    DualQuaternion,
}

impl DeformationMode {
    pub fn width(self) -> usize {
        match self {
            DeformationMode::Displacement => 3,
            DeformationMode::DualQuaternion => 8,
        }
    }

    pub fn from_width(d: usize) -> Result<Self> {
        match d {
            3 => Ok(DeformationMode::Displacement),
            8 => Ok(DeformationMode::DualQuaternion),
            _ => Err(Error::invalid(format!("d_deform must be 3 or 8, got {d}"))),
        }
    }
}

/// Row-major `n x width` values, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    mode: DeformationMode,
    values: Vec<f64>,
}

impl DeformationField {
    pub fn new(mode: DeformationMode, values: Vec<f64>) -> Result<Self> {
        if values.len() % mode.width() != 0 {
            return Err(Error::shape(
                "deformation_field",
                format!("{} values is not a multiple of {}", values.len(), mode.width()),
            ));
        }
        Ok(Self { mode, values })
    }

    pub fn zeros(mode: DeformationMode, n: usize) -> Self {
        match mode {
            DeformationMode::Displacement => Self { mode, values: vec![0.0; 3 * n] },
            DeformationMode::DualQuaternion => {
                let id = DualQuat::identity().to_array();
                Self { mode, values: (0..n).flat_map(|_| id).collect() }
            }
        }
    }

    pub fn uniform_displacement(t: Vec3, n: usize) -> Self {
        Self { mode: DeformationMode::Displacement, values: (0..n).flat_map(|_| [t.x, t.y, t.z]).collect() }
    }

    pub fn mode(&self) -> DeformationMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.mode.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.mode.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn displacement(&self, i: usize) -> Vec3 {
        let r = self.row(i);
        Vec3::new(r[0], r[1], r[2])
    }

    pub fn dualquat(&self, i: usize) -> DualQuat {
        DualQuat::from_slice(self.row(i))
    }

    /// Per-sample displacement vectors. Dual-quaternion rows are normalized
    /// and applied to the sample's own rest position.
    pub fn displacements_at(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        if positions.len() != self.len() {
            return Err(Error::shape("displacements_at", format!("{} positions for {} samples", positions.len(), self.len())));
        }
        match self.mode {
            DeformationMode::Displacement => Ok((0..self.len()).map(|i| self.displacement(i)).collect()),
            DeformationMode::DualQuaternion => positions
                .iter()
                .enumerate()
                .map(|(i, p)| Ok(self.dualquat(i).normalized()?.apply(p)? - p))
                .collect(),
        }
    }
}

/// Indices of the `k` nearest points to `q`, nearest first, ties by lower index.
pub fn nearest_k(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
}

/// Deformation carrying `frame_a` sample positions to `frame_b`.
pub fn transfer_deformation(
    samples: &SurfaceSamples,
    faces: &[[usize; 3]],
    frame_a: &[Vec3],
    frame_b: &[Vec3],
    mode: DeformationMode,
) -> Result<DeformationField> {
    if frame_a.len() != frame_b.len() {
        return Err(Error::shape("transfer_deformation", format!("frames have {} and {} vertices", frame_a.len(), frame_b.len())));
    }
    let pa = samples.positions_on(faces, frame_a);
    let pb = samples.positions_on(faces, frame_b);
    match mode {
        DeformationMode::Displacement => {
            // Barycentric interpolation is linear, so interpolating V_b - V_a
            // equals the difference of interpolated positions.
            let values = pa.iter().zip(&pb).flat_map(|(a, b)| {
                let d = b - a;
                [d.x, d.y, d.z]
            });
            DeformationField::new(mode, values.collect())
        }
        DeformationMode::DualQuaternion => {
            if pa.len() < 3 {
                return Err(Error::invalid("dual-quaternion transfer needs at least 3 samples"));
            }
            let mut values = Vec::with_capacity(8 * pa.len());
            let mut flagged = 0usize;
            for q in &pa {
                let nbr = nearest_k(&pa, q, K_NBR);
                let src: Vec<Vec3> = nbr.iter().map(|(i, _)| pa[*i]).collect();
                let dst: Vec<Vec3> = nbr.iter().map(|(i, _)| pb[*i]).collect();
                let fit = fit_dualquat(&src, &dst)?;
                flagged += fit.degenerate as usize;
                values.extend_from_slice(&fit.dq.to_array());
            }
            if flagged > 0 {
                log::debug!("{flagged} sample neighbourhoods were collinear; used translation-only fits");
            }
            DeformationField::new(mode, values)
        }
    }
}

/// Inverse-distance weights from every vertex to its `k` nearest samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveStencil {
    k: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl DriveStencil {
    pub fn new(vertices: &[Vec3], sample_positions: &[Vec3], k_drive: usize) -> Result<Self> {
        if k_drive == 0 {
            return Err(Error::invalid("k_drive must be at least 1"));
        }
        if sample_positions.is_empty() {
            return Err(Error::invalid("cannot drive a mesh from zero samples"));
        }
        let k = if k_drive > sample_positions.len() {
            log::warn!("k_drive = {k_drive} exceeds {} samples; clamping", sample_positions.len());
            sample_positions.len()
        } else {
            k_drive
        };
        let mut index = Vec::with_capacity(vertices.len() * k);
        let mut weight = Vec::with_capacity(vertices.len() * k);
        for v in vertices {
            let nbr = nearest_k(sample_positions, v, k);
            let w: Vec<f64> = nbr.iter().map(|(_, d)| 1.0 / (d + 1e-8)).collect();
            let total: f64 = w.iter().sum();
            for ((i, _), wi) in nbr.iter().zip(w) {
                index.push(*i);
                weight.push(wi / total);
            }
        }
        Ok(Self { k, index, weight })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_vertices(&self) -> usize {
        self.index.len() / self.k
    }

    /// Sample indices for vertex `v`, nearest first.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.index[v * self.k..(v + 1) * self.k]
    }

    pub fn weights(&self, v: usize) -> &[f64] {
        &self.weight[v * self.k..(v + 1) * self.k]
    }

    /// Flat neighbour index list, `n_vertices * k` long.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// Deformed vertex positions.
    pub fn apply(&self, vertices: &[Vec3], field: &DeformationField) -> Result<Vec<Vec3>> {
        if vertices.len() != self.n_vertices() {
            return Err(Error::shape("drive_mesh", format!("stencil built for {} vertices, got {}", self.n_vertices(), vertices.len())));
        }
        if let Some(&max) = self.index.iter().max() {
            if max >= field.len() {
                return Err(Error::shape("drive_mesh", format!("field has {} samples, stencil needs {}", field.len(), max + 1)));
            }
        }
        match field.mode() {
            DeformationMode::Displacement => Ok(vertices
                .iter()
                .enumerate()
                .map(|(v, p)| {
                    let d: Vec3 = self.neighbors(v).iter().zip(self.weights(v)).map(|(i, w)| field.displacement(*i) * *w).sum();
                    p + d
                })
                .collect()),
            DeformationMode::DualQuaternion => vertices
                .iter()
                .enumerate()
                .map(|(v, p)| {
                    let dqs: Vec<DualQuat> = self.neighbors(v).iter().map(|i| field.dualquat(*i)).collect();
                    blend(self.weights(v), &dqs)?.apply(p)
                })
                .collect(),
        }
    }
}

/// Deforms `vertices` by inverse-distance averaging over the `k_drive`
/// nearest samples.
pub fn drive_mesh(
    vertices: &[Vec3],
    samples: &SurfaceSamples,
    field: &DeformationField,
    k_drive: usize,
) -> Result<Vec<Vec3>> {
    if field.len() != samples.len() {
        return Err(Error::shape("drive_mesh", format!("field has {} rows for {} samples", field.len(), samples.len())));
    }
    DriveStencil::new(vertices, samples.positions(), k_drive)?.apply(vertices, field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::Mesh;
    use crate::geometry::sampling::{sample_surface, vertex_samples};
    use nalgebra::UnitQuaternion;

    /// Two unit squares meeting at x = 0, subdivided so halves have their own vertices.
    fn strip() -> Mesh {
        let mut v = Vec::new();
        for j in 0..=2 {
            for i in 0..=4 {
                v.push(Vec3::new(-1.0 + 0.5 * i as f64, 0.5 * j as f64, 0.0));
            }
        }
        let mut f = Vec::new();
        for j in 0..2 {
            for i in 0..4 {
                let a = j * 5 + i;
                f.push([a, a + 1, a + 6]);
                f.push([a, a + 6, a + 5]);
            }
        }
        Mesh::new(v, f).unwrap()
    }

    #[test]
    fn identity_and_translation_transfers() {
        let m = strip();
        let s = sample_surface(&m, 200, 1).unwrap();
        let same = transfer_deformation(&s, m.faces(), m.vertices(), m.vertices(), DeformationMode::Displacement).unwrap();
        assert!(same.values().iter().all(|v| *v == 0.0));
        let shifted: Vec<Vec3> = m.vertices().iter().map(|p| p + Vec3::x()).collect();
        let f = transfer_deformation(&s, m.faces(), m.vertices(), &shifted, DeformationMode::Displacement).unwrap();
        for i in 0..f.len() {
            assert!((f.displacement(i) - Vec3::x()).norm() < 1e-15);
        }
        assert!(transfer_deformation(&s, m.faces(), m.vertices(), &shifted[..3], DeformationMode::Displacement).is_err());
    }

    #[test]
    fn hinge_rotation_transfer_matches_direct_rotation() {
        let m = strip();
        let rot = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), 30f64.to_radians());
        // Right half (x >= 0) swings about the y axis through the origin.
        let moved: Vec<Vec3> = m.vertices().iter().map(|p| if p.x > 0.0 { rot * p } else { *p }).collect();
        let s = sample_surface(&m, 300, 4).unwrap();
        let f = transfer_deformation(&s, m.faces(), m.vertices(), &moved, DeformationMode::Displacement).unwrap();
        for (i, a) in s.anchors().iter().enumerate() {
            let face = m.faces()[a.face];
            if face.iter().all(|&v| m.vertices()[v].x >= 0.0) {
                let p = s.positions()[i];
                assert!((f.displacement(i) - (rot * p - p)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn dualquat_transfer_of_rigid_motion_reproduces_positions() {
        let m = strip();
        let r = UnitQuaternion::from_euler_angles(0.4, -0.2, 1.0);
        let t = Vec3::new(0.3, -0.1, 0.7);
        let moved: Vec<Vec3> = m.vertices().iter().map(|p| r * p + t).collect();
        let s = sample_surface(&m, 64, 9).unwrap();
        let f = transfer_deformation(&s, m.faces(), m.vertices(), &moved, DeformationMode::DualQuaternion).unwrap();
        for i in 0..f.len() {
            let q = f.dualquat(i);
            assert!(q.is_unit());
            let p = s.positions()[i];
            assert!((q.apply(&p).unwrap() - (r * p + t)).norm() < 1e-9);
        }
        let driven = drive_mesh(m.vertices(), &s, &f, 4).unwrap();
        for (d, want) in driven.iter().zip(&moved) {
            assert!((d - want).norm() < 1e-9);
        }
    }

    #[test]
    fn drive_uniform_zero_and_nearest() {
        let m = strip();
        let s = sample_surface(&m, 50, 2).unwrap();
        let t = Vec3::new(0.1, -0.2, 0.3);
        for k in [1, 3, 50, 80] {
            let out = drive_mesh(m.vertices(), &s, &DeformationField::uniform_displacement(t, 50), k).unwrap();
            assert!(out.iter().zip(m.vertices()).all(|(o, v)| (o - v - t).norm() < 1e-12));
        }
        for mode in [DeformationMode::Displacement, DeformationMode::DualQuaternion] {
            let out = drive_mesh(m.vertices(), &s, &DeformationField::zeros(mode, 50), 4).unwrap();
            assert_eq!(out, m.vertices());
        }
        // k = 1: every vertex takes its brute-force nearest sample's displacement.
        let values: Vec<f64> = (0..150).map(|i| i as f64 * 0.01).collect();
        let field = DeformationField::new(DeformationMode::Displacement, values).unwrap();
        let out = drive_mesh(m.vertices(), &s, &field, 1).unwrap();
        for (v, o) in m.vertices().iter().zip(&out) {
            let mut best = 0;
            for (i, p) in s.positions().iter().enumerate() {
                if (p - v).norm() < (s.positions()[best] - v).norm() {
                    best = i;
                }
            }
            assert!((o - v - field.displacement(best)).norm() < 1e-12);
        }
    }

    #[test]
    fn vertex_sample_round_trip() {
        let m = strip();
        let s = vertex_samples(&m).unwrap();
        let target: Vec<Vec3> =
            m.vertices().iter().map(|p| Vec3::new(p.x * 1.1, p.y + p.x * p.x, (3.0 * p.x).sin())).collect();
        let f = transfer_deformation(&s, m.faces(), m.vertices(), &target, DeformationMode::Displacement).unwrap();
        let out = drive_mesh(m.vertices(), &s, &f, 1).unwrap();
        for (o, t) in out.iter().zip(&target) {
            assert!((o - t).norm() < 1e-9);
        }
    }

    #[test]
    fn nearest_k_breaks_ties_by_index() {
        let pts = vec![Vec3::x(), -Vec3::x(), Vec3::y(), Vec3::x() * 3.0];
        let n = nearest_k(&pts, &Vec3::zeros(), 2);
        assert_eq!(n.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }
}
