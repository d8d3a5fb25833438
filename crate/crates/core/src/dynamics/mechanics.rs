//! Euler–Lagrange dynamics on a latent chart with the pullback metric.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::maps::LatentMap;
use crate::autodiff::{directional_second_derivative_with_center, hessian_contraction};
use crate::error::{Error, Result};

/// Point on the chart with its velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Seconds.
    pub t: f64,
}

impl DynamicState {
    pub fn at_rest(k: usize) -> Self {
        Self { q: vec![0.0; k], qdot: vec![0.0; k], t: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|v| v.is_finite()) && self.t.is_finite()
    }
}

/// Constant force applied to each listed vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalForce {
    pub vertices: Vec<usize>,
    /// Newtons.
    pub force: [f64; 3],
}

/// Quadratic pull of the latent towards `z_rest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentAnchor {
    pub z_rest: Vec<f64>,
    pub stiffness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSpec {
    /// Total mass, kg, spread uniformly over vertices.
    pub mass: f64,
    /// m/s^2.
    pub gravity: [f64; 3],
    pub forces: Vec<ExternalForce>,
    pub anchor: Option<LatentAnchor>,
    /// Damping coefficient, kg/s per unit vertex mass basis.
    pub damping: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self { mass: 1.0, gravity: [0.0, 0.0, -9.81], forces: vec![], anchor: None, damping: 0.0 }
    }
}

impl PotentialSpec {
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::invalid(format!("potential.mass must be positive, got {}", self.mass)));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::invalid(format!("potential.damping must be non-negative, got {}", self.damping)));
        }
        if let Some(a) = &self.anchor {
            if !(a.stiffness >= 0.0) {
                return Err(Error::invalid("potential.anchor.stiffness must be non-negative"));
            }
        }
        for (i, f) in self.forces.iter().enumerate() {
            if let Some(v) = f.vertices.iter().find(|v| **v >= n_vertices) {
                return Err(Error::invalid(format!("potential.forces[{i}] names vertex {v}, mesh has {n_vertices}")));
            }
        }
        Ok(())
    }

    /// Mass of one vertex.
    pub fn vertex_mass(&self, n_vertices: usize) -> f64 {
        self.mass / n_vertices as f64
    }

    /// Gradient of the ambient part of `V` with respect to flattened positions.
    fn ambient_gradient(&self, n_vertices: usize) -> Vec<f64> {
        let mu = self.vertex_mass(n_vertices);
        let mut g: Vec<f64> = (0..n_vertices).flat_map(|_| self.gravity.map(|a| -mu * a)).collect();
        for f in &self.forces {
            for v in &f.vertices {
                for a in 0..3 {
                    g[3 * v + a] -= f.force[a];
                }
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    SemiImplicit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticRoute {
    #[default]
    DirectionalFd,
    FullHessian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub integrator: Integrator,
    /// Metric regularization; `None` uses `1e-8 trace(J^T J) / k_q` at the initial state.
    pub metric_eps: Option<f64>,
    /// Finite-difference step for the quadratic term; `None` uses `1e-4 (1 + |q|_inf)`.
    pub fd_step: Option<f64>,
    pub route: QuadraticRoute,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 1e-3, steps: 1000, integrator: Integrator::Rk4, metric_eps: None, fd_step: None, route: QuadraticRoute::DirectionalFd }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("sim.dt must be positive, got {}", self.dt)));
        }
        if let Some(e) = self.metric_eps {
            if !(e >= 0.0) {
                return Err(Error::invalid("sim.metric_eps must be non-negative"));
            }
        }
        if let Some(h) = self.fd_step {
            if !(h > 0.0) {
                return Err(Error::invalid("sim.fd_step must be positive"));
            }
        }
        Ok(())
    }
}

/// Default metric regularization at `q`.
pub fn default_metric_eps(map: &dyn LatentMap, q: &[f64]) -> Result<f64> {
    let (_, j) = map.jacobian(q)?;
    Ok(1e-8 * j.norm_squared() / map.dim() as f64)
}

fn gram(j: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let mut g = j.transpose() * j;
    // Exact symmetry regardless of summation order.
    g = (&g + g.transpose()) * 0.5;
    for i in 0..g.nrows() {
        g[(i, i)] += eps;
    }
    g
}

/// `J^T J + eps I`.
pub fn metric(map: &dyn LatentMap, q: &[f64], eps: f64) -> Result<DMatrix<f64>> {
    let (_, j) = map.jacobian(q)?;
    Ok(gram(&j, eps))
}

fn fd_step(cfg: &SimConfig, q: &[f64]) -> f64 {
    cfg.fd_step.unwrap_or_else(|| 1e-4 * (1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
}

/// Second derivative of `F` along `qdot`: `sum_jk d_j d_k F qdot_j qdot_k`.
fn second_derivative(map: &dyn LatentMap, q: &[f64], x: &[f64], qdot: &[f64], route: QuadraticRoute, h: f64) -> Result<Vec<f64>> {
    let speed = qdot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Ok(vec![0.0; map.output_dim()]);
    }
    match route {
        QuadraticRoute::DirectionalFd => {
            // Unit direction keeps the stencil width at h whatever the speed.
            let u: Vec<f64> = qdot.iter().map(|v| v / speed).collect();
            let s = directional_second_derivative_with_center(|p| map.eval(p), q, x, &u, h)?;
            Ok(s.into_iter().map(|v| v * speed * speed).collect())
        }
        QuadraticRoute::FullHessian => hessian_contraction(
            |p| {
                let (_, j) = map.jacobian(p)?;
                let rows: Vec<f64> = (0..j.nrows()).flat_map(|r| j.row(r).iter().copied().collect::<Vec<_>>()).collect();
                Ok((j.nrows(), rows))
            },
            q,
            qdot,
            h,
        ),
    }
}

/// Quadratic-velocity force `C = mu J^T (d^2 F)[qdot, qdot]`, `mu` the vertex mass.
pub fn quadratic_velocity_term(map: &dyn LatentMap, q: &[f64], qdot: &[f64], vertex_mass: f64, cfg: &SimConfig) -> Result<Vec<f64>> {
    let (x, j) = map.jacobian(q)?;
    let s = second_derivative(map, q, &x, qdot, cfg.route, fd_step(cfg, q))?;
    Ok((j.transpose() * DVector::from_vec(s) * vertex_mass).as_slice().to_vec())
}

fn potential_from(map: &dyn LatentMap, q: &[f64], x: &[f64], j: &DMatrix<f64>, spec: &PotentialSpec) -> (f64, Vec<f64>) {
    let n = map.n_vertices();
    let gx = spec.ambient_gradient(n);
    // V_ambient is linear in x with gradient gx.
    let mut v: f64 = gx.iter().zip(x).map(|(g, x)| g * x).sum();
    let mut grad = (j.transpose() * DVector::from_column_slice(&gx)).as_slice().to_vec();
    if let Some(a) = &spec.anchor {
        let z = map.latent(q);
        let dz: Vec<f64> = z.iter().zip(&a.z_rest).map(|(z, r)| z - r).collect();
        v += 0.5 * a.stiffness * dz.iter().map(|d| d * d).sum::<f64>();
        let gz: Vec<f64> = dz.iter().map(|d| a.stiffness * d).collect();
        for (g, p) in grad.iter_mut().zip(map.latent_pullback(&gz)) {
            *g += p;
        }
    }
    (v, grad)
}

/// Potential energy (J) and its chart gradient.
pub fn potential(map: &dyn LatentMap, q: &[f64], spec: &PotentialSpec) -> Result<(f64, Vec<f64>)> {
    spec.validate(map.n_vertices())?;
    if let Some(a) = &spec.anchor {
        if a.z_rest.len() != map.latent(q).len() {
            return Err(Error::invalid("potential.anchor.z_rest has the wrong dimension"));
        }
    }
    let (x, j) = map.jacobian(q)?;
    Ok(potential_from(map, q, &x, &j, spec))
}

/// Per-step energies, J.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub t: Vec<f64>,
    pub kinetic: Vec<f64>,
    pub potential: Vec<f64>,
    pub total: Vec<f64>,
}

impl EnergyReport {
    /// `max |E - E_0| / max(|E_0|, 1e-12)`.
    pub fn relative_drift(&self) -> f64 {
        let Some(e0) = self.total.first() else { return 0.0 };
        self.total.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0.abs().max(1e-12)
    }

    /// One row per state; `drift` is `|E - E_0| / max(|E_0|, 1e-12)`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,kinetic,potential,total,drift\n");
        let e0 = self.total.first().copied().unwrap_or(0.0);
        for i in 0..self.t.len() {
            let drift = (self.total[i] - e0).abs() / e0.abs().max(1e-12);
            s.push_str(&format!("{i},{},{},{},{},{drift}\n", self.t[i], self.kinetic[i], self.potential[i], self.total[i]));
        }
        s
    }
}

/// Evaluates accelerations and energies for one simulation, reusing the
/// last Jacobian when the same configuration is asked for twice.
pub struct Dynamics<'a> {
    map: &'a dyn LatentMap,
    spec: &'a PotentialSpec,
    cfg: &'a SimConfig,
    eps: f64,
    mu: f64,
    cache: Option<(Vec<f64>, Vec<f64>, DMatrix<f64>)>,
}

impl<'a> Dynamics<'a> {
    pub fn new(map: &'a dyn LatentMap, spec: &'a PotentialSpec, cfg: &'a SimConfig, q0: &[f64]) -> Result<Self> {
        cfg.validate()?;
        spec.validate(map.n_vertices())?;
        if q0.len() != map.dim() {
            return Err(Error::shape("dynamics", format!("state has {} coordinates, map expects {}", q0.len(), map.dim())));
        }
        if let Some(a) = &spec.anchor {
            if a.z_rest.len() != map.latent(q0).len() {
                return Err(Error::invalid("potential.anchor.z_rest has the wrong dimension"));
            }
        }
        let eps = match cfg.metric_eps {
            Some(e) => e,
            None => default_metric_eps(map, q0)?,
        };
        Ok(Self { map, spec, cfg, eps, mu: spec.vertex_mass(map.n_vertices()), cache: None })
    }

    pub fn metric_eps(&self) -> f64 {
        self.eps
    }

    fn eval(&mut self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if let Some((cq, x, j)) = &self.cache {
            if cq.as_slice() == q {
                return Ok((x.clone(), j.clone()));
            }
        }
        let (x, j) = self.map.jacobian(q)?;
        self.cache = Some((q.to_vec(), x.clone(), j.clone()));
        Ok((x, j))
    }

    /// `qddot = -G^{-1} (C + grad V) / mu - (c / mu) qdot`.
    pub fn acceleration(&mut self, q: &[f64], qdot: &[f64]) -> Result<Vec<f64>> {
        let (x, j) = self.eval(q)?;
        let g = gram(&j, self.eps);
        let s = second_derivative(self.map, q, &x, qdot, self.cfg.route, fd_step(self.cfg, q))?;
        let c = j.transpose() * DVector::from_vec(s) * self.mu;
        let (_, dv) = potential_from(self.map, q, &x, &j, self.spec);
        let rhs = -(c + DVector::from_vec(dv)) / self.mu;
        let sol = match g.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => g.lu().solve(&rhs).ok_or_else(|| Error::Numerical(format!("singular metric at q = {q:?}")))?,
        };
        let damp = self.spec.damping / self.mu;
        let a: Vec<f64> = sol.iter().zip(qdot).map(|(a, v)| a - damp * v).collect();
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite acceleration at q = {q:?}, qdot = {qdot:?}")));
        }
        Ok(a)
    }

    /// `(kinetic, potential)` with `T = mu/2 qdot^T G qdot`.
    pub fn energy(&mut self, state: &DynamicState) -> Result<(f64, f64)> {
        let (x, j) = self.eval(&state.q)?;
        let g = gram(&j, self.eps);
        let v = DVector::from_column_slice(&state.qdot);
        let kinetic = 0.5 * self.mu * v.dot(&(&g * &v));
        let (pot, _) = potential_from(self.map, &state.q, &x, &j, self.spec);
        Ok((kinetic, pot))
    }

    pub fn step(&mut self, s: &DynamicState) -> Result<DynamicState> {
        let h = self.cfg.dt;
        let next = match self.cfg.integrator {
            Integrator::SemiImplicit => {
                let a = self.acceleration(&s.q, &s.qdot)?;
                let qdot: Vec<f64> = s.qdot.iter().zip(&a).map(|(v, a)| v + h * a).collect();
                let q = s.q.iter().zip(&qdot).map(|(q, v)| q + h * v).collect();
                DynamicState { q, qdot, t: s.t + h }
            }
            Integrator::Rk4 => {
                let axpy = |x: &[f64], a: f64, y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(x, y)| x + a * y).collect() };
                let k1v = s.qdot.clone();
                let k1a = self.acceleration(&s.q, &s.qdot)?;
                let q2 = axpy(&s.q, 0.5 * h, &k1v);
                let v2 = axpy(&s.qdot, 0.5 * h, &k1a);
                let k2a = self.acceleration(&q2, &v2)?;
                let q3 = axpy(&s.q, 0.5 * h, &v2);
                let v3 = axpy(&s.qdot, 0.5 * h, &k2a);
                let k3a = self.acceleration(&q3, &v3)?;
                let q4 = axpy(&s.q, h, &v3);
                let v4 = axpy(&s.qdot, h, &k3a);
                let k4a = self.acceleration(&q4, &v4)?;
                let n = s.q.len();
                let q = (0..n).map(|i| s.q[i] + h / 6.0 * (k1v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i])).collect();
                let qdot = (0..n).map(|i| s.qdot[i] + h / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i])).collect();
                DynamicState { q, qdot, t: s.t + h }
            }
        };
        if !next.is_finite() {
            return Err(Error::Numerical(format!("state became non-finite after t = {}", s.t)));
        }
        Ok(next)
    }
}

/// One step of the configured integrator.
pub fn step(map: &dyn LatentMap, state: &DynamicState, spec: &PotentialSpec, cfg: &SimConfig) -> Result<DynamicState> {
    Dynamics::new(map, spec, cfg, &state.q)?.step(state)
}

/// States `0..=steps` and their energies. A failing step ends the run early;
/// the states computed so far are kept and the error is returned alongside.
#[derive(Debug)]
pub struct Simulation {
    pub states: Vec<DynamicState>,
    pub energy: EnergyReport,
    pub metric_eps: f64,
    pub failure: Option<Error>,
}

pub fn simulate(map: &dyn LatentMap, initial: &DynamicState, spec: &PotentialSpec, cfg: &SimConfig) -> Result<Simulation> {
    let mut dyn_ = Dynamics::new(map, spec, cfg, &initial.q)?;
    if initial.qdot.len() != map.dim() || !initial.is_finite() {
        return Err(Error::invalid("initial state must be finite and match the chart dimension"));
    }
    let mut states = vec![initial.clone()];
    let mut energy = EnergyReport::default();
    let record = |d: &mut Dynamics, s: &DynamicState, e: &mut EnergyReport| -> Result<()> {
        let (k, p) = d.energy(s)?;
        e.t.push(s.t);
        e.kinetic.push(k);
        e.potential.push(p);
        e.total.push(k + p);
        Ok(())
    };
    record(&mut dyn_, initial, &mut energy)?;
    let mut failure = None;
    for _ in 0..cfg.steps {
        let next = match dyn_.step(states.last().expect("non-empty")) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if let Err(e) = record(&mut dyn_, &next, &mut energy) {
            failure = Some(e);
            break;
        }
        states.push(next);
    }
    Ok(Simulation { states, energy, metric_eps: dyn_.metric_eps(), failure })
}
