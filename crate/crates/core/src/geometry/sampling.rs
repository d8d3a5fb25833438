//! Area-weighted stratified surface sampling with barycentric anchors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mesh::{Mesh, Vec3};
use crate::error::{Error, Result};

/// Surface point pinned to a face by barycentric weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub face: usize,
    pub bary: [f64; 3],
}

/// Samples anchored on a mesh, with positions on the mesh they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    anchors: Vec<Anchor>,
    positions: Vec<Vec3>,
}

impl SurfaceSamples {
    pub fn from_anchors(mesh: &Mesh, anchors: Vec<Anchor>) -> Result<Self> {
        for (i, a) in anchors.iter().enumerate() {
            if a.face >= mesh.faces().len() {
                return Err(Error::invalid(format!("sample {i} references face {} out of range", a.face)));
            }
            let s: f64 = a.bary.iter().sum();
            if a.bary.iter().any(|b| *b < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("sample {i} has invalid barycentric weights {:?}", a.bary)));
            }
        }
        let positions = evaluate(&anchors, mesh.faces(), mesh.vertices());
        Ok(Self { anchors, positions })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Positions of the same anchors on another frame of the topology.
    pub fn positions_on(&self, faces: &[[usize; 3]], vertices: &[Vec3]) -> Vec<Vec3> {
        evaluate(&self.anchors, faces, vertices)
    }

    /// Re-anchors onto another frame (same faces, new vertex positions).
    pub fn rebased(&self, mesh: &Mesh) -> Self {
        Self { anchors: self.anchors.clone(), positions: evaluate(&self.anchors, mesh.faces(), mesh.vertices()) }
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

fn evaluate(anchors: &[Anchor], faces: &[[usize; 3]], v: &[Vec3]) -> Vec<Vec3> {
    anchors
        .iter()
        .map(|a| {
            let f = faces[a.face];
            v[f[0]] * a.bary[0] + v[f[1]] * a.bary[1] + v[f[2]] * a.bary[2]
        })
        .collect()
}

/// Draws `n_sample` points with density proportional to area.
///
/// Strata `[i/n, (i+1)/n)` of the cumulative-area axis each receive one
/// draw, so per-face counts deviate from `n * area_fraction` by at most one
/// per face boundary crossed.
pub fn sample_surface(mesh: &Mesh, n_sample: usize, seed: u64) -> Result<SurfaceSamples> {
    if n_sample == 0 {
        return Err(Error::invalid("n_sample must be at least 1"));
    }
    let mut cdf = Vec::with_capacity(mesh.faces().len());
    let mut acc = 0.0;
    for f in 0..mesh.faces().len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = Vec::with_capacity(n_sample);
    for i in 0..n_sample {
        let u = (i as f64 + rng.random::<f64>()) / n_sample as f64 * acc;
        let mut face = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
        // Skip zero-area faces that share the cumulative value.
        while mesh.face_area(face) == 0.0 && face + 1 < cdf.len() {
            face += 1;
        }
        let s = rng.random::<f64>().sqrt();
        let r = rng.random::<f64>();
        let bary = [1.0 - s, s * (1.0 - r), s * r];
        anchors.push(Anchor { face, bary });
    }
    let positions = evaluate(&anchors, mesh.faces(), mesh.vertices());
    Ok(SurfaceSamples { anchors, positions })
}

/// One sample per vertex, anchored at a face corner. Used for round-trip
/// checks where samples must coincide with vertices.
pub fn vertex_samples(mesh: &Mesh) -> Result<SurfaceSamples> {
    let mut anchors = vec![None; mesh.n_vertices()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        for (c, &v) in f.iter().enumerate() {
            if anchors[v].is_none() {
                let mut bary = [0.0; 3];
                bary[c] = 1.0;
                anchors[v] = Some(Anchor { face: fi, bary });
            }
        }
    }
    let anchors = anchors
        .into_iter()
        .enumerate()
        .map(|(v, a)| a.ok_or_else(|| Error::invalid(format!("vertex {v} is not used by any face"))))
        .collect::<Result<Vec<_>>>()?;
    SurfaceSamples::from_anchors(mesh, anchors)
}
