//! Tessellated primitives with lattice bookkeeping.

use std::collections::HashMap;

use crate::geometry::{Face, Vec3};

/// Surface mesh of an axis-aligned box split into `cells` per axis.
///
/// `lattice[v]` holds the integer grid coordinate of vertex `v`, which the
/// spring builders use to find neighbours.
pub struct Tessellation {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<Face>,
    pub lattice: Vec<[usize; 3]>,
}

impl Tessellation {
    /// Appends `other`, shifting its face indices.
    pub fn append(&mut self, other: Tessellation) {
        let off = self.vertices.len();
        self.vertices.extend(other.vertices);
        self.faces.extend(other.faces.into_iter().map(|f| f.map(|i| i + off)));
        self.lattice.extend(other.lattice);
    }
}

pub fn box_mesh(lo: Vec3, hi: Vec3, cells: [usize; 3]) -> Tessellation {
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut t = Tessellation { vertices: Vec::new(), faces: Vec::new(), lattice: Vec::new() };
    let mut vid = |c: [usize; 3], t: &mut Tessellation| -> usize {
        *index.entry(c).or_insert_with(|| {
            let p = Vec3::from_fn(|a, _| lo[a] + (hi[a] - lo[a]) * c[a] as f64 / cells[a] as f64);
            t.vertices.push(p);
            t.lattice.push(c);
            t.vertices.len() - 1
        })
    };
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in [0, cells[a]] {
            for u in 0..cells[b] {
                for v in 0..cells[c] {
                    let at = |du: usize, dv: usize| {
                        let mut p = [0; 3];
                        p[a] = side;
                        p[b] = u + du;
                        p[c] = v + dv;
                        p
                    };
                    let q = [at(0, 0), at(1, 0), at(1, 1), at(0, 1)].map(|p| vid(p, &mut t));
                    // Counter-clockwise in the (b, c) plane faces +a.
                    if side == 0 {
                        t.faces.push([q[0], q[2], q[1]]);
                        t.faces.push([q[0], q[3], q[2]]);
                    } else {
                        t.faces.push([q[0], q[1], q[2]]);
                        t.faces.push([q[0], q[2], q[3]]);
                    }
                }
            }
        }
    }
    t
}

/// Flat `nx x ny` cell grid in the xy plane starting at `origin`.
pub fn grid_sheet(origin: Vec3, size: [f64; 2], cells: [usize; 2]) -> Tessellation {
    let [nx, ny] = cells;
    let mut t = Tessellation { vertices: Vec::new(), faces: Vec::new(), lattice: Vec::new() };
    for j in 0..=ny {
        for i in 0..=nx {
            t.vertices.push(origin + Vec3::new(size[0] * i as f64 / nx as f64, size[1] * j as f64 / ny as f64, 0.0));
            t.lattice.push([i, j, 0]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    for j in 0..ny {
        for i in 0..nx {
            t.faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            t.faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    t
}
