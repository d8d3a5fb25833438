//! Jacobians and second directional derivatives of vector maps.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Exact Jacobian `[m, k]` of a graph-built map `R^k -> R^m` at `at`.
///
/// `build` receives a fresh graph and the rank-1 input variable and must
/// return a rank-1 output. Columns are obtained by forward-mode tangents,
/// so row `i` equals the gradient of output `i`.
pub fn jacobian<F>(build: F, at: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    if at.rank() != 1 {
        return Err(Error::shape("jacobian", format!("input must be a vector, got {:?}", at.shape())));
    }
    let mut g = Graph::new();
    let z = g.variable(at.clone());
    let out = build(&mut g, z)?;
    jacobian_of(&g, z, out)
}

/// Jacobian of an already-recorded output with respect to a recorded rank-1 input.
pub fn jacobian_of(g: &Graph, input: Var, output: Var) -> Result<Tensor> {
    let xs = g.value(input).shape();
    let ys = g.value(output).shape();
    if xs.len() != 1 || ys.len() != 1 {
        return Err(Error::shape(
            "jacobian",
            format!("input {xs:?} and output {ys:?} must both be vectors"),
        ));
    }
    let (k, m) = (xs[0], ys[0]);
    let mut jac = vec![0.0; m * k];
    for col in 0..k {
        let mut e = vec![0.0; k];
        e[col] = 1.0;
        let tangents = g.jvp(&[(input, Tensor::vector(e))])?;
        if let Some(t) = tangents.get(output) {
            for (row, v) in t.data().iter().enumerate() {
                jac[row * k + col] = *v;
            }
        }
    }
    Tensor::matrix(m, k, jac)
}

/// Second-order central stencil `[F(z + h v) - 2 F(z) + F(z - h v)] / h^2`.
pub fn directional_second_derivative<F>(map: F, at: &[f64], dir: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if at.len() != dir.len() {
        return Err(Error::shape("directional_second_derivative", "point and direction lengths differ"));
    }
    let center = map(at)?;
    directional_second_derivative_with_center(map, at, &center, dir, step)
}

/// Same as [`directional_second_derivative`] with `F(z)` already known.
pub fn directional_second_derivative_with_center<F>(
    map: F,
    at: &[f64],
    center: &[f64],
    dir: &[f64],
    step: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let plus: Vec<f64> = at.iter().zip(dir).map(|(z, v)| z + step * v).collect();
    let minus: Vec<f64> = at.iter().zip(dir).map(|(z, v)| z - step * v).collect();
    let fp = map(&plus)?;
    let fm = map(&minus)?;
    if fp.len() != center.len() || fm.len() != center.len() {
        return Err(Error::shape("directional_second_derivative", "map output length changed"));
    }
    let h2 = step * step;
    Ok(fp.iter().zip(&fm).zip(center).map(|((p, m), c)| (p - 2.0 * c + m) / h2).collect())
}

/// Full Hessian contraction `sum_jk d_j d_k F_a v_j v_k` by nested
/// differentiation: central differences of the exact Jacobian along every
/// coordinate axis, symmetrised, then contracted twice with `dir`.
///
/// `jac` returns the row-major `[m, k]` Jacobian at a point.
pub fn hessian_contraction<J>(jac: J, at: &[f64], dir: &[f64], step: f64) -> Result<Vec<f64>>
where
    J: Fn(&[f64]) -> Result<(usize, Vec<f64>)>,
{
    let k = at.len();
    if dir.len() != k {
        return Err(Error::shape("hessian_contraction", "point and direction lengths differ"));
    }
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    // dj[c] holds d/dz_c of the Jacobian, [m, k].
    let mut dj = Vec::with_capacity(k);
    let mut m = 0;
    for c in 0..k {
        let mut zp = at.to_vec();
        let mut zm = at.to_vec();
        zp[c] += step;
        zm[c] -= step;
        let (mp, jp) = jac(&zp)?;
        let (_, jm) = jac(&zm)?;
        m = mp;
        dj.push(jp.iter().zip(&jm).map(|(a, b)| (a - b) / (2.0 * step)).collect::<Vec<f64>>());
    }
    let mut out = vec![0.0; m];
    for (a, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..k {
            for c in 0..k {
                let h = 0.5 * (dj[c][a * k + j] + dj[j][a * k + c]);
                acc += h * dir[j] * dir[c];
            }
        }
        *o = acc;
    }
    Ok(out)
}
