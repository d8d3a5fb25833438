//! Triangle meshes, shared-topology trajectories and their on-disk forms.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

pub type Vec3 = Vector3<f64>;
pub type Face = [usize; 3];

/// Triangle mesh with positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<Face>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<Face>) -> Result<Self> {
        validate_topology(vertices.len(), &faces)?;
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("vertex {i} is not finite")));
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Same topology, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(
                "mesh.with_vertices",
                format!("expected {} vertices, got {}", self.vertices.len(), vertices.len()),
            ));
        }
        Ok(Self { vertices, faces: self.faces.clone() })
    }

    pub fn face_area(&self, f: usize) -> f64 {
        triangle_area(&self.vertices, self.faces[f])
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.vertices)
    }

    /// Every undirected edge is used by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i != 2 {
                return false;
            }
            i = j;
        }
        !edges.is_empty()
    }

    /// Row-major `3n` coordinate vector.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.vertices)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(40 * (self.vertices.len() + self.faces.len()));
        for v in &self.vertices {
            // Display for f64 prints the shortest string that round-trips.
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses `v` and triangular `f` records; other records are ignored.
    /// Face entries may carry `/vt/vn` suffixes.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("obj line {}: {e}", lineno + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Format(format!("obj line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| {
                            t.split('/')
                                .next()
                                .and_then(|s| s.parse::<usize>().ok())
                                .filter(|i| *i >= 1)
                                .map(|i| i - 1)
                                .ok_or_else(|| Error::Format(format!("obj line {}: bad face index '{t}'", lineno + 1)))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(Error::Format(format!(
                            "obj line {}: only triangles are supported, got {} indices",
                            lineno + 1,
                            idx.len()
                        )));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Mesh::new(vertices, faces)
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_obj().as_bytes())
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn validate_topology(n: usize, faces: &[Face]) -> Result<()> {
    if n < 3 {
        return Err(Error::invalid(format!("mesh needs at least 3 vertices, got {n}")));
    }
    for (i, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v >= n) {
            return Err(Error::invalid(format!("face {i} references a vertex >= {n}")));
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::invalid(format!("face {i} repeats a vertex")));
        }
    }
    Ok(())
}

pub(crate) fn triangle_area(v: &[Vec3], f: Face) -> f64 {
    0.5 * (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]])).norm()
}

pub fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Hex SHA-256 over the face index list.
pub fn topology_hash(faces: &[Face]) -> String {
    let mut bytes = Vec::with_capacity(faces.len() * 24);
    for f in faces {
        for i in f {
            bytes.extend_from_slice(&(*i as u64).to_le_bytes());
        }
    }
    io_util::sha256_hex(&bytes)
}

/// Sequence of vertex frames over one shared topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    faces: Vec<Face>,
    frames: Vec<Vec<Vec3>>,
    dt: f64,
}

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryManifest {
    pub schema_version: u32,
    pub dt: f64,
    pub n_vertices: usize,
    pub frames: Vec<String>,
    pub topology_hash: String,
}

impl Trajectory {
    pub fn new(faces: Vec<Face>, frames: Vec<Vec<Vec3>>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if frames.len() < 2 {
            return Err(Error::invalid(format!("trajectory needs at least 2 frames, got {}", frames.len())));
        }
        let n = frames[0].len();
        validate_topology(n, &faces)?;
        if let Some(i) = frames.iter().position(|f| f.len() != n) {
            return Err(Error::shape("trajectory", format!("frame {i} has {} vertices, expected {n}", frames[i].len())));
        }
        Ok(Self { faces, frames, dt })
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn frames(&self) -> &[Vec<Vec3>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[Vec3] {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.frames[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mesh(&self, i: usize) -> Mesh {
        Mesh { vertices: self.frames[i].clone(), faces: self.faces.clone() }
    }

    pub fn topology_hash(&self) -> String {
        topology_hash(&self.faces)
    }

    /// Applies `f` to every vertex of every frame.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        let frames = self.frames.iter().map(|fr| fr.iter().map(&f).collect()).collect();
        Self { faces: self.faces.clone(), frames, dt: self.dt }
    }

    /// Writes `frame_XXXX.obj` files plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<TrajectoryManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(self.frames.len());
        for i in 0..self.frames.len() {
            let name = format!("frame_{i:04}.obj");
            self.mesh(i).save_obj(&dir.join(&name))?;
            names.push(name);
        }
        let manifest = TrajectoryManifest {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            dt: self.dt,
            n_vertices: self.n_vertices(),
            frames: names,
            topology_hash: self.topology_hash(),
        };
        io_util::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TrajectoryManifest = io_util::read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported trajectory schema_version {}", manifest.schema_version)));
        }
        let mut faces = None;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for name in &manifest.frames {
            let mesh = Mesh::load_obj(&dir.join(name))?;
            if topology_hash(&mesh.faces) != manifest.topology_hash {
                return Err(Error::Format(format!("{name}: topology hash does not match manifest")));
            }
            faces.get_or_insert(mesh.faces);
            frames.push(mesh.vertices);
        }
        Trajectory::new(faces.unwrap_or_default(), frames, manifest.dt)
    }
}
