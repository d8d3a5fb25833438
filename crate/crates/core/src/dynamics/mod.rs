//! Lagrangian simulation on a latent chart: pullback metric, quadratic
//! velocity forces, potentials, integration and boundary fitting.

mod boundary;
mod maps;
mod mechanics;

pub use boundary::{export_motion, fit_boundary, BoundaryFit, BoundaryTargets, FitOptions};
pub use maps::{GraphMap, LatentMap, LinearMap, MlpMap, NeurokMap, PendulumMap};
pub use mechanics::{
    default_metric_eps, metric, potential, quadratic_velocity_term, simulate, step, DynamicState, Dynamics,
    EnergyReport, ExternalForce, Integrator, LatentAnchor, PotentialSpec, QuadraticRoute, SimConfig, Simulation,
};

/// Times at which `x` crosses zero upwards, linearly interpolated.
pub fn upward_crossings(t: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..x.len().min(t.len()) {
        if x[i - 1] < 0.0 && x[i] >= 0.0 {
            let f = -x[i - 1] / (x[i] - x[i - 1]);
            out.push(t[i - 1] + f * (t[i] - t[i - 1]));
        }
    }
    out
}

/// Mean spacing of upward zero crossings.
pub fn measured_period(t: &[f64], x: &[f64]) -> Option<f64> {
    let c = upward_crossings(t, x);
    if c.len() < 2 {
        return None;
    }
    Some((c[c.len() - 1] - c[0]) / (c.len() - 1) as f64)
}
