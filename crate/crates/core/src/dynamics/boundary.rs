//! Initial chart state from prescribed vertex positions and velocities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::maps::LatentMap;
use crate::error::{Error, Result};
use crate::geometry::{unflatten, Face, Trajectory};

/// Prescribed positions (and optionally velocities) of selected vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryTargets {
    pub vertices: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    /// Empty means "no velocity targets".
    #[serde(default)]
    pub velocities: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once `|r| / |x0|` falls below this.
    pub tol: f64,
    /// Initial Levenberg–Marquardt damping.
    pub damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-12, damping: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// `|F_T(q) - x0| / |x0|`.
    pub position_residual: f64,
    /// `|J_T qdot - v0| / |v0|` (0 without velocity targets).
    pub velocity_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn rows_of(targets: &BoundaryTargets) -> Vec<usize> {
    targets.vertices.iter().flat_map(|v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
}

fn restrict(x: &[f64], j: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let xs = DVector::from_iterator(rows.len(), rows.iter().map(|r| x[*r]));
    let js = DMatrix::from_fn(rows.len(), j.ncols(), |r, c| j[(rows[r], c)]);
    (xs, js)
}

/// Damped Gauss–Newton on the target position residual, then the damped
/// least-squares velocity. Returns the best iterate when the iteration
/// budget runs out (`converged = false`).
pub fn fit_boundary(map: &dyn LatentMap, targets: &BoundaryTargets, init: &[f64], opts: &FitOptions) -> Result<BoundaryFit> {
    let n = map.n_vertices();
    if targets.vertices.is_empty() {
        return Err(Error::invalid("boundary fitting needs at least one target vertex"));
    }
    if targets.positions.len() != targets.vertices.len() {
        return Err(Error::invalid("boundary targets need one position per vertex"));
    }
    if !targets.velocities.is_empty() && targets.velocities.len() != targets.vertices.len() {
        return Err(Error::invalid("boundary velocities must be empty or one per vertex"));
    }
    if let Some(v) = targets.vertices.iter().find(|v| **v >= n) {
        return Err(Error::invalid(format!("boundary target vertex {v} out of range ({n} vertices)")));
    }
    if init.len() != map.dim() {
        return Err(Error::shape("fit_boundary", "initial guess has the wrong dimension"));
    }
    let rows = rows_of(targets);
    let x0 = DVector::from_iterator(rows.len(), targets.positions.iter().flatten().copied());
    let scale = x0.norm().max(1e-300);

    let mut q = DVector::from_column_slice(init);
    let (x, j) = map.jacobian(q.as_slice())?;
    let (xs, mut js) = restrict(&x, &j, &rows);
    let mut r = &xs - &x0;
    let mut lambda = opts.damping;
    let mut iterations = 0;
    let mut converged = r.norm() / scale <= opts.tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let jtj = js.transpose() * &js;
        let g = js.transpose() * &r;
        let mut improved = false;
        // Raise the damping until the step reduces the residual; large
        // damping turns the step into a short gradient-descent step.
        for _ in 0..30 {
            let mut a = jtj.clone();
            let diag_scale = jtj.diagonal().amax().max(1e-12);
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * diag_scale;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &q + &step;
            let (xc, jc) = map.jacobian(cand.as_slice())?;
            let (xsc, jsc) = restrict(&xc, &jc, &rows);
            let rc = &xsc - &x0;
            if rc.norm() < r.norm() {
                q = cand;
                js = jsc;
                r = rc;
                lambda = (lambda * 0.3).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        converged = r.norm() / scale <= opts.tol;
        if !improved {
            // No descent possible at any damping: stationary point.
            break;
        }
    }
    let position_residual = r.norm() / scale;
    if !converged {
        log::warn!("boundary fit stopped after {iterations} iterations with relative residual {position_residual:.3e}");
    }

    let (qdot, velocity_residual) = if targets.velocities.is_empty() {
        (vec![0.0; map.dim()], 0.0)
    } else {
        let v0 = DVector::from_iterator(rows.len(), targets.velocities.iter().flatten().copied());
        let svd = js.clone().svd(true, true);
        let smax = svd.singular_values.amax();
        // Tikhonov damping far below the squared singular values of any usable direction.
        let delta = 1e-14 * smax * smax;
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let mut qd = DVector::zeros(map.dim());
        for (i, s) in svd.singular_values.iter().enumerate() {
            let coef = s / (s * s + delta) * u.column(i).dot(&v0);
            qd += vt.row(i).transpose() * coef;
        }
        let res = (&js * &qd - &v0).norm() / v0.norm().max(1e-300);
        (qd.as_slice().to_vec(), res)
    };
    Ok(BoundaryFit { q: q.as_slice().to_vec(), qdot, position_residual, velocity_residual, iterations, converged })
}

/// Decodes every state into a mesh frame of shared topology.
pub fn export_motion(map: &dyn LatentMap, qs: &[Vec<f64>], faces: &[Face], dt: f64) -> Result<Trajectory> {
    let frames = qs.iter().map(|q| Ok(unflatten(&map.eval(q)?))).collect::<Result<Vec<_>>>()?;
    Trajectory::new(faces.to_vec(), frames, dt)
}
