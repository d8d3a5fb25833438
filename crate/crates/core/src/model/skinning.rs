//! Differentiable application of predicted fields to points and meshes.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{DeformationMode, DriveStencil, Vec3};

fn column_matrix(points: &[Vec3], perm: [usize; 3]) -> Tensor {
    let data = points.iter().flat_map(|p| [p[perm[0]], p[perm[1]], p[perm[2]]]).collect();
    Tensor::new(vec![points.len(), 3], data).expect("point matrix")
}

fn permutation(g: &mut Graph, perm: [usize; 3]) -> Var {
    // x @ P picks column perm[c] into column c.
    let mut data = vec![0.0; 9];
    for (c, src) in perm.iter().enumerate() {
        data[src * 3 + c] = 1.0;
    }
    g.constant(Tensor::new(vec![3, 3], data).expect("permutation"))
}

/// Rigid transforms `[n, 8]` (not necessarily unit) applied to `points`,
/// giving `[n, 3]`. Each row is normalized implicitly, matching
/// `DualQuat::normalized().apply()`.
pub fn apply_dualquats(g: &mut Graph, dq: Var, points: &[Vec3]) -> Result<Var> {
    let shape = g.value(dq).shape().to_vec();
    if shape != [points.len(), 8] {
        return Err(Error::shape("apply_dualquats", format!("expected [{}, 8], got {shape:?}", points.len())));
    }
    const YZX: [usize; 3] = [1, 2, 0];
    const ZXY: [usize; 3] = [2, 0, 1];
    let p = g.constant(column_matrix(points, [0, 1, 2]));
    let p_yzx = g.constant(column_matrix(points, YZX));
    let p_zxy = g.constant(column_matrix(points, ZXY));
    let ones = g.constant(Tensor::full(&[3, 1], 1.0));
    let m_yzx = permutation(g, YZX);
    let m_zxy = permutation(g, ZXY);

    let w = g.slice_cols(dq, 0, 1)?;
    let v = g.slice_cols(dq, 1, 4)?;
    let dw = g.slice_cols(dq, 4, 5)?;
    let dv = g.slice_cols(dq, 5, 8)?;

    let w2 = g.square(w)?;
    let v2 = g.square(v)?;
    let vv = g.matmul(v2, ones)?;
    let r2 = g.add(w2, vv)?;

    // (w^2 - |v|^2) p + 2 (v.p) v + 2 w (v x p)
    let a = g.sub(w2, vv)?;
    let t1 = g.mul(a, p)?;
    let vp = g.mul(v, p)?;
    let vdotp = g.matmul(vp, ones)?;
    let t2 = g.mul(vdotp, v)?;
    let t2 = g.scale(t2, 2.0);
    let v_yzx = g.matmul(v, m_yzx)?;
    let v_zxy = g.matmul(v, m_zxy)?;
    let c1 = g.mul(v_yzx, p_zxy)?;
    let c2 = g.mul(v_zxy, p_yzx)?;
    let vxp = g.sub(c1, c2)?;
    let t3 = g.mul(w, vxp)?;
    let t3 = g.scale(t3, 2.0);
    let rot = g.add(t1, t2)?;
    let rot = g.add(rot, t3)?;

    // 2 (w dv - dw v + v x dv)
    let s1 = g.mul(w, dv)?;
    let s2 = g.mul(dw, v)?;
    let dv_yzx = g.matmul(dv, m_yzx)?;
    let dv_zxy = g.matmul(dv, m_zxy)?;
    let c1 = g.mul(v_yzx, dv_zxy)?;
    let c2 = g.mul(v_zxy, dv_yzx)?;
    let vxdv = g.sub(c1, c2)?;
    let tr = g.sub(s1, s2)?;
    let tr = g.add(tr, vxdv)?;
    let tr = g.scale(tr, 2.0);

    let sum = g.add(rot, tr)?;
    g.div(sum, r2)
}

/// Driven vertex positions `[n_vertices, 3]` from per-sample field rows
/// `[n_sample, d]`, following `DriveStencil::apply`.
pub fn drive_graph(g: &mut Graph, field: Var, stencil: &DriveStencil, vertices: &[Vec3], mode: DeformationMode) -> Result<Var> {
    let d = mode.width();
    let (n_s, width) = g.value(field).dims2();
    if width != d {
        return Err(Error::shape("drive_graph", format!("field width {width}, mode needs {d}")));
    }
    if stencil.n_vertices() != vertices.len() || stencil.index().iter().any(|i| *i >= n_s) {
        return Err(Error::shape("drive_graph", "stencil does not match the vertices or the field"));
    }
    let k = stencil.k();
    let n = vertices.len();
    let mut weights = stencil.weight().to_vec();
    if mode == DeformationMode::DualQuaternion {
        // Sign-align to the nearest sample; piecewise constant, so it carries no derivative.
        let vals = g.value(field).data();
        for v in 0..n {
            let nb = stencil.neighbors(v);
            let pivot = &vals[nb[0] * 8..nb[0] * 8 + 4];
            for (j, s) in nb.iter().enumerate() {
                let q = &vals[s * 8..s * 8 + 4];
                if pivot.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                    weights[v * k + j] = -weights[v * k + j];
                }
            }
        }
    }
    let gathered = g.gather_rows(field, stencil.index())?;
    let wcol = g.constant(Tensor::new(vec![n * k, 1], weights)?);
    let weighted = g.mul(gathered, wcol)?;
    let wide = g.reshape(weighted, &[n, k * d])?;
    let mut sum = vec![0.0; k * d * d];
    for j in 0..k {
        for c in 0..d {
            sum[(j * d + c) * d + c] = 1.0;
        }
    }
    let sum = g.constant(Tensor::new(vec![k * d, d], sum)?);
    let blended = g.matmul(wide, sum)?;
    match mode {
        DeformationMode::Displacement => {
            let base = g.constant(column_matrix(vertices, [0, 1, 2]));
            g.add(base, blended)
        }
        DeformationMode::DualQuaternion => apply_dualquats(g, blended, vertices),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{DeformationField, DualQuat};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dqs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n)
            .flat_map(|_| {
                let r = UnitQuaternion::from_euler_angles(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let t = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let mut a = DualQuat::from_rotation_translation(&r, &t).to_array();
                // Non-unit scale and a random sign.
                let s = rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                a.iter_mut().for_each(|x| *x *= s);
                a
            })
            .collect()
    }

    #[test]
    fn graph_apply_matches_dualquat_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64 * 0.3, 1.0 - i as f64, 0.2)).collect();
        let vals = random_dqs(6, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![6, 8], vals.clone()).unwrap());
        let out = apply_dualquats(&mut g, x, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = DualQuat::from_slice(&vals[i * 8..i * 8 + 8]).normalized().unwrap().apply(p).unwrap();
            for a in 0..3 {
                assert!((g.value(out).at(i, a) - want[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_drive_matches_stencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec3> = (0..12).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let verts: Vec<Vec3> = (0..7).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let stencil = DriveStencil::new(&verts, &samples, 3).unwrap();
        let dq = random_dqs(12, &mut rng);
        let disp: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (mode, vals) in [(DeformationMode::DualQuaternion, dq), (DeformationMode::Displacement, disp)] {
            let field = DeformationField::new(mode, vals.clone()).unwrap();
            let want = stencil.apply(&verts, &field).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![12, mode.width()], vals).unwrap());
            let out = drive_graph(&mut g, x, &stencil, &verts, mode).unwrap();
            for (i, w) in want.iter().enumerate() {
                for a in 0..3 {
                    assert!((g.value(out).at(i, a) - w[a]).abs() < 1e-12, "{mode:?}");
                }
            }
        }
    }
}
