//! Mass-spring networks integrated with semi-implicit Euler.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest: f64,
    pub k: f64,
}

#[derive(Clone, Debug)]
pub struct SpringSystem {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub mass: Vec<f64>,
    pub pinned: Vec<bool>,
    pub springs: Vec<Spring>,
    pub gravity: Vec3,
    /// Mass-proportional damping, 1/s.
    pub damping: f64,
}

impl SpringSystem {
    /// Springs between every pair of points whose lattice coordinates
    /// differ by at most `reach` along each axis (and are not equal).
    pub fn lattice_springs(x: &[Vec3], lattice: &[[usize; 3]], reach: &[[i64; 3]], k: f64) -> Vec<Spring> {
        let lookup: std::collections::HashMap<[usize; 3], usize> =
            lattice.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let mut springs = Vec::new();
        for (a, c) in lattice.iter().enumerate() {
            for off in reach {
                let nb = [0, 1, 2].map(|ax| c[ax] as i64 + off[ax]);
                if nb.iter().any(|v| *v < 0) {
                    continue;
                }
                if let Some(&b) = lookup.get(&nb.map(|v| v as usize)) {
                    springs.push(Spring { a, b, rest: (x[a] - x[b]).norm(), k });
                }
            }
        }
        springs
    }

    /// Upper bound on the highest angular frequency (Gershgorin on M^-1 K).
    pub fn omega_max(&self) -> f64 {
        let mut row = vec![0.0; self.x.len()];
        for s in &self.springs {
            row[s.a] += s.k;
            row[s.b] += s.k;
        }
        row.iter()
            .zip(&self.mass)
            .zip(&self.pinned)
            .filter(|(_, p)| !**p)
            .map(|((r, m), _)| (2.0 * r / m).sqrt())
            .fold(0.0, f64::max)
    }

    /// Fails when `h` is beyond the explicit stability limit `2 / omega_max`.
    pub fn check_step(&self, h: f64) -> Result<()> {
        let limit = 2.0 / self.omega_max();
        if h > limit {
            return Err(Error::invalid(format!(
                "spring network is unstable: substep {h:.3e} s exceeds 2/omega_max = {limit:.3e} s; use dt <= {:.3e} s",
                0.9 * limit * 100.0
            )));
        }
        Ok(())
    }

    pub fn step(&mut self, h: f64) {
        let mut f: Vec<Vec3> = self.mass.iter().map(|m| self.gravity * *m).collect();
        for s in &self.springs {
            let d = self.x[s.b] - self.x[s.a];
            let len = d.norm();
            if len > 0.0 {
                let fs = d * (s.k * (len - s.rest) / len);
                f[s.a] += fs;
                f[s.b] -= fs;
            }
        }
        for i in 0..self.x.len() {
            if self.pinned[i] {
                continue;
            }
            let a = f[i] / self.mass[i] - self.v[i] * self.damping;
            self.v[i] += a * h;
            self.x[i] += self.v[i] * h;
        }
    }

    pub fn energy(&self) -> (f64, f64) {
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for i in 0..self.x.len() {
            kinetic += 0.5 * self.mass[i] * self.v[i].norm_squared();
            potential -= self.mass[i] * self.gravity.dot(&self.x[i]);
        }
        for s in &self.springs {
            let e = (self.x[s.b] - self.x[s.a]).norm() - s.rest;
            potential += 0.5 * s.k * e * e;
        }
        (kinetic, potential)
    }
}

/// All offsets in {-1, 0, 1}^3 pointing "forward", so each pair appears once.
pub fn forward_offsets_3d() -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if [dz, dy, dx] > [0, 0, 0] {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_cover_each_pair_once() {
        let o = forward_offsets_3d();
        assert_eq!(o.len(), 13);
        for a in &o {
            assert!(!o.contains(&a.map(|v| -v)));
        }
    }

    #[test]
    fn two_body_spring_oscillates_at_the_analytic_frequency() {
        // One free mass on a pinned spring: omega = sqrt(k/m).
        let mut s = SpringSystem {
            x: vec![Vec3::zeros(), Vec3::new(1.1, 0.0, 0.0)],
            v: vec![Vec3::zeros(); 2],
            mass: vec![1.0, 0.5],
            pinned: vec![true, false],
            springs: vec![Spring { a: 0, b: 1, rest: 1.0, k: 8.0 }],
            gravity: Vec3::zeros(),
            damping: 0.0,
        };
        let h = 1e-4;
        let period = 2.0 * std::f64::consts::PI / 4.0;
        let steps = (period / h).round() as usize;
        for _ in 0..steps {
            s.step(h);
        }
        assert!((s.x[1].x - 1.1).abs() < 1e-3);
        assert!(s.check_step(1e-3).is_ok());
        assert!(s.check_step(1.0).is_err());
    }
}
