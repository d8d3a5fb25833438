//! Unit dual quaternions for rigid transforms, with blending and fitting.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};

use super::mesh::Vec3;
use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Rigid transform `p -> R p + t` as `real + eps * dual`, with
/// `dual = 0.5 * t * real`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuat {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuat {
    pub fn identity() -> Self {
        Self { real: Quaternion::identity(), dual: Quaternion::new(0.0, 0.0, 0.0, 0.0) }
    }

    pub fn from_rotation_translation(r: &UnitQuaternion<f64>, t: &Vec3) -> Self {
        let real = *r.quaternion();
        let tq = Quaternion::new(0.0, t.x, t.y, t.z);
        Self { real, dual: tq * real * 0.5 }
    }

    pub fn from_translation(t: &Vec3) -> Self {
        Self::from_rotation_translation(&UnitQuaternion::identity(), t)
    }

    /// Packed as `[rw, rx, ry, rz, dw, dx, dy, dz]`.
    pub fn to_array(&self) -> [f64; 8] {
        let (r, d) = (&self.real, &self.dual);
        [r.w, r.i, r.j, r.k, d.w, d.i, d.j, d.k]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { real: Quaternion::new(v[0], v[1], v[2], v[3]), dual: Quaternion::new(v[4], v[5], v[6], v[7]) }
    }

    pub fn is_unit(&self) -> bool {
        (self.real.norm() - 1.0).abs() <= UNIT_TOL && self.real.coords.dot(&self.dual.coords).abs() <= UNIT_TOL
    }

    /// Scales to a unit real part and removes the dual component along it.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.real.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Numerical(format!("cannot normalize dual quaternion with |real| = {n}")));
        }
        let real = self.real / n;
        let dual = self.dual / n;
        let along = real.coords.dot(&dual.coords);
        Ok(Self { real, dual: dual - real * along })
    }

    /// Same transform with `real.w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.real.w < 0.0 {
            Self { real: -self.real, dual: -self.dual }
        } else {
            *self
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.real)
    }

    pub fn translation(&self) -> Vec3 {
        let t = self.dual * self.real.conjugate() * 2.0;
        Vec3::new(t.i, t.j, t.k)
    }

    /// Applies the transform, rejecting non-unit input.
    pub fn apply(&self, p: &Vec3) -> Result<Vec3> {
        if !self.is_unit() {
            return Err(Error::invalid(format!(
                "dual quaternion is not unit (|real| = {}, <real,dual> = {})",
                self.real.norm(),
                self.real.coords.dot(&self.dual.coords)
            )));
        }
        Ok(self.rotation() * p + self.translation())
    }

    /// Composition: `(a * b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, other: &DualQuat) -> Self {
        Self { real: self.real * other.real, dual: self.real * other.dual + self.dual * other.real }
    }

    pub fn inverse(&self) -> Self {
        Self { real: self.real.conjugate(), dual: self.dual.conjugate() }
    }
}

/// Normalized weighted sum with every input sign-aligned to the first.
pub fn blend(weights: &[f64], dqs: &[DualQuat]) -> Result<DualQuat> {
    if weights.len() != dqs.len() || dqs.is_empty() {
        return Err(Error::invalid("blend needs matching, non-empty weights and dual quaternions"));
    }
    let pivot = dqs[0].real.coords;
    let mut real = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut dual = real;
    for (w, q) in weights.iter().zip(dqs) {
        let s = if pivot.dot(&q.real.coords) < 0.0 { -w } else { *w };
        real += q.real * s;
        dual += q.dual * s;
    }
    DualQuat { real, dual }.normalized()
}

/// Result of a rigid least-squares fit.
#[derive(Clone, Copy, Debug)]
pub struct DualQuatFit {
    pub dq: DualQuat,
    /// `sqrt(sum |R a_i + t - b_i|^2)`.
    pub residual: f64,
    /// Set when the source points were collinear and only a translation was fitted.
    pub degenerate: bool,
}

/// Orthogonal Procrustes fit of `b ≈ R a + t`.
pub fn fit_dualquat(a: &[Vec3], b: &[Vec3]) -> Result<DualQuatFit> {
    if a.len() != b.len() {
        return Err(Error::shape("fit_dualquat", format!("{} source vs {} target points", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::invalid(format!("fit_dualquat needs at least 3 points, got {}", a.len())));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        let (pa, qb) = (p - ca, q - cb);
        h += pa * qb.transpose();
        spread += pa * pa.transpose();
    }
    // Collinear sets have a second principal spread of zero.
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    let degenerate = !(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2];

    let rot = if degenerate {
        Matrix3::identity()
    } else {
        let svd = h.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let d = (vt.transpose() * u.transpose()).determinant().signum();
        vt.transpose() * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose()
    };
    let r = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let t = cb - r * ca;
    let residual = a.iter().zip(b).map(|(p, q)| (r * p + t - q).norm_squared()).sum::<f64>().sqrt();
    let dq = DualQuat::from_rotation_translation(&r, &t).canonical();
    Ok(DualQuatFit { dq, residual, degenerate })
}
