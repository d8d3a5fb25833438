//! Scenario specifications and ground-truth trajectory generation.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use super::shapes::{box_mesh, grid_sheet, Tessellation};
use super::springs::{forward_offsets_3d, SpringSystem};
use crate::error::{Error, Result};
use crate::geometry::{Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Pendulum,
    Hinge,
    MassSpringBeam,
    ClothSheet,
    FreeRigid,
}

/// Shape parameters. Lengths in meters; `resolution` is the cell count
/// along the longest dimension of each part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    /// Pendulum arm (pivot to bob centre), hinge leaf, beam or sheet length, rigid box edge.
    pub length: f64,
    /// Hinge leaf depth, beam cross-section, sheet width.
    pub width: f64,
    /// Hinge leaf and pendulum rod thickness.
    pub thickness: f64,
    /// Pendulum bob edge length.
    pub bob_size: f64,
    pub resolution: usize,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self { length: 1.0, width: 0.4, thickness: 0.05, bob_size: 0.2, resolution: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    /// Gravitational acceleration magnitude along -z, m/s^2.
    pub gravity: f64,
    /// Total mass, kg.
    pub mass: f64,
    /// Spring stiffness, N/m.
    pub stiffness: f64,
    /// Velocity damping rate, 1/s.
    pub damping: f64,
    /// Initial angle (pendulum, hinge), rad.
    pub amplitude: f64,
    /// Initial angular rate (pendulum, hinge), rad/s.
    pub angular_velocity: f64,
    /// Hinge restoring rate, 1/s^2. Zero gives constant angular velocity.
    pub hinge_stiffness: f64,
    /// Hinge rest angle, rad.
    pub rest_angle: f64,
    /// Free rigid body initial velocity, m/s.
    pub velocity: [f64; 3],
    /// Free rigid body angular velocity, rad/s.
    pub spin: [f64; 3],
    /// Pendulum uses the linearized equation `theta'' = -(g/L) theta`.
    pub small_angle: bool,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            mass: 1.0,
            stiffness: 2000.0,
            damping: 0.0,
            amplitude: 0.1,
            angular_velocity: 0.0,
            hinge_stiffness: 0.0,
            rest_angle: 0.0,
            velocity: [0.0; 3],
            spin: [0.0; 3],
            small_angle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    /// Seconds.
    pub duration: f64,
    /// Seconds per output frame.
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: GeometryParams,
    #[serde(default)]
    pub physics: PhysicsParams,
}

/// Diagnostics from generation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    /// Internal integration step, s.
    pub substep: f64,
    /// Mass-spring kinds without damping: max |E - E0| over the run divided
    /// by the largest kinetic energy reached.
    pub energy_drift: Option<f64>,
    /// Per-frame angle for pendulum and hinge kinds, rad.
    pub angles: Option<Vec<f64>>,
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{field} must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{field} must be non-negative, got {v}")))
    }
}

impl ScenarioSpec {
    pub fn new(name: &str, kind: ScenarioKind, duration: f64, dt: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            duration,
            dt,
            seed: 0,
            geometry: GeometryParams::default(),
            physics: PhysicsParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid(format!("name '{}' must be a non-empty path component", self.name)));
        }
        positive("dt", self.dt)?;
        positive("duration", self.duration)?;
        if self.duration < self.dt {
            return Err(Error::invalid(format!("duration ({}) must be at least dt ({})", self.duration, self.dt)));
        }
        let (g, p) = (&self.geometry, &self.physics);
        positive("geometry.length", g.length)?;
        positive("geometry.width", g.width)?;
        positive("geometry.thickness", g.thickness)?;
        positive("geometry.bob_size", g.bob_size)?;
        let min_res = match self.kind {
            ScenarioKind::ClothSheet | ScenarioKind::MassSpringBeam => 2,
            _ => 1,
        };
        if g.resolution < min_res {
            return Err(Error::invalid(format!("geometry.resolution must be at least {min_res} for {:?}", self.kind)));
        }
        non_negative("physics.gravity", p.gravity)?;
        positive("physics.mass", p.mass)?;
        non_negative("physics.damping", p.damping)?;
        non_negative("physics.hinge_stiffness", p.hinge_stiffness)?;
        if matches!(self.kind, ScenarioKind::ClothSheet | ScenarioKind::MassSpringBeam) {
            positive("physics.stiffness", p.stiffness)?;
        }
        if self.kind == ScenarioKind::Pendulum && g.bob_size / 2.0 >= g.length {
            return Err(Error::invalid("geometry.bob_size must be smaller than twice geometry.length"));
        }
        for (name, v) in [("physics.amplitude", p.amplitude), ("physics.angular_velocity", p.angular_velocity)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if p.velocity.iter().chain(&p.spin).any(|v| !v.is_finite()) {
            return Err(Error::invalid("physics.velocity and physics.spin must be finite"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }
}

pub fn generate(spec: &ScenarioSpec) -> Result<Trajectory> {
    generate_with_report(spec).map(|(t, _)| t)
}

pub fn generate_with_report(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    spec.validate()?;
    match spec.kind {
        ScenarioKind::Pendulum => pendulum(spec),
        ScenarioKind::Hinge => hinge(spec),
        ScenarioKind::MassSpringBeam => beam(spec),
        ScenarioKind::ClothSheet => cloth(spec),
        ScenarioKind::FreeRigid => free_rigid(spec),
    }
}

fn cells_for(dims: [f64; 3], resolution: usize) -> [usize; 3] {
    let longest = dims.iter().cloned().fold(0.0, f64::max);
    dims.map(|d| ((resolution as f64 * d / longest).round() as usize).max(1))
}

/// Classic RK4 on `(theta, omega)` with `sub` substeps per frame.
fn integrate_angle(
    accel: impl Fn(f64, f64) -> f64,
    theta0: f64,
    omega0: f64,
    dt: f64,
    frames: usize,
    sub: usize,
) -> Vec<f64> {
    let h = dt / sub as f64;
    let (mut th, mut om) = (theta0, omega0);
    let mut out = Vec::with_capacity(frames);
    out.push(th);
    for _ in 1..frames {
        for _ in 0..sub {
            let k1 = (om, accel(th, om));
            let k2 = (om + 0.5 * h * k1.1, accel(th + 0.5 * h * k1.0, om + 0.5 * h * k1.1));
            let k3 = (om + 0.5 * h * k2.1, accel(th + 0.5 * h * k2.0, om + 0.5 * h * k2.1));
            let k4 = (om + h * k3.1, accel(th + h * k3.0, om + h * k3.1));
            th += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            om += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        out.push(th);
    }
    out
}

const ANGLE_OVERSAMPLING: usize = 10;
const SPRING_SUBSTEPS: usize = 100;

/// Rod and bob hanging from a pivot at the origin, swinging in the xz plane.
fn pendulum(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    let (g, p) = (&spec.geometry, &spec.physics);
    let half_rod = g.thickness / 2.0;
    let rod_len = g.length - g.bob_size / 2.0;
    let mut mesh = box_mesh(
        Vec3::new(-half_rod, -half_rod, -rod_len),
        Vec3::new(half_rod, half_rod, 0.0),
        cells_for([g.thickness, g.thickness, rod_len], g.resolution),
    );
    let hb = g.bob_size / 2.0;
    let r = (g.resolution / 3).max(1);
    mesh.append(box_mesh(Vec3::new(-hb, -hb, -g.length - hb), Vec3::new(hb, hb, -g.length + hb), [r, r, r]));

    let w2 = p.gravity / g.length;
    let (c, small) = (p.damping, p.small_angle);
    let frames = spec.frame_count();
    let angles = integrate_angle(
        |th, om| if small { -w2 * th - c * om } else { -w2 * th.sin() - c * om },
        p.amplitude,
        p.angular_velocity,
        spec.dt,
        frames,
        ANGLE_OVERSAMPLING,
    );
    // Positive angle swings the bob toward +x.
    let frames_v = angles
        .iter()
        .map(|th| {
            let rot = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), -th);
            mesh.vertices.iter().map(|v| rot * v).collect()
        })
        .collect();
    let traj = Trajectory::new(mesh.faces, frames_v, spec.dt)?;
    let report = GenerationReport { substep: spec.dt / ANGLE_OVERSAMPLING as f64, energy_drift: None, angles: Some(angles) };
    Ok((traj, report))
}

/// Two boxes side by side; the +x leaf rotates about the y axis through the shared bottom edge.
fn hinge(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    let (g, p) = (&spec.geometry, &spec.physics);
    let cells = cells_for([g.length, g.width, g.thickness], g.resolution);
    let base = box_mesh(Vec3::new(-g.length, 0.0, 0.0), Vec3::new(0.0, g.width, g.thickness), cells);
    let leaf = box_mesh(Vec3::zeros(), Vec3::new(g.length, g.width, g.thickness), cells);
    let n_base = base.vertices.len();
    let mut mesh = base;
    mesh.append(leaf);

    let frames = spec.frame_count();
    let angles: Vec<f64> = if p.hinge_stiffness == 0.0 && p.damping == 0.0 {
        // Kinematic: exact constant-rate rotation.
        (0..frames).map(|i| p.amplitude + p.angular_velocity * spec.dt * i as f64).collect()
    } else {
        let (k, c, rest) = (p.hinge_stiffness, p.damping, p.rest_angle);
        integrate_angle(|th, om| -k * (th - rest) - c * om, p.amplitude, p.angular_velocity, spec.dt, frames, ANGLE_OVERSAMPLING)
    };
    let frames_v = angles
        .iter()
        .map(|phi| {
            // Rotating by -phi about +y lifts the leaf toward +z.
            let rot = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), -phi);
            mesh.vertices.iter().enumerate().map(|(i, v)| if i < n_base { *v } else { rot * v }).collect()
        })
        .collect();
    let traj = Trajectory::new(mesh.faces, frames_v, spec.dt)?;
    let report = GenerationReport { substep: spec.dt / ANGLE_OVERSAMPLING as f64, energy_drift: None, angles: Some(angles) };
    Ok((traj, report))
}

fn run_springs(spec: &ScenarioSpec, mesh: Tessellation, mut sys: SpringSystem) -> Result<(Trajectory, GenerationReport)> {
    let h = spec.dt / SPRING_SUBSTEPS as f64;
    sys.check_step(h)?;
    let frames = spec.frame_count();
    let mut out = Vec::with_capacity(frames);
    out.push(sys.x.clone());
    let (k0, p0) = sys.energy();
    let e0 = k0 + p0;
    let (mut max_dev, mut max_kin) = (0.0f64, k0);
    for _ in 1..frames {
        for _ in 0..SPRING_SUBSTEPS {
            sys.step(h);
            let (k, p) = sys.energy();
            max_dev = max_dev.max((k + p - e0).abs());
            max_kin = max_kin.max(k);
        }
        out.push(sys.x.clone());
    }
    if out.iter().flatten().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::Numerical(format!("scenario '{}' produced non-finite positions", spec.name)));
    }
    let energy_drift = (sys.damping == 0.0).then(|| max_dev / max_kin.max(1e-12));
    let traj = Trajectory::new(mesh.faces, out, spec.dt)?;
    Ok((traj, GenerationReport { substep: h, energy_drift, angles: None }))
}

/// Lattice beam along +x, clamped at x = 0, sagging under gravity.
fn beam(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    let (g, p) = (&spec.geometry, &spec.physics);
    let mesh = box_mesh(Vec3::new(0.0, -g.width / 2.0, -g.width / 2.0), Vec3::new(g.length, g.width / 2.0, g.width / 2.0), [g.resolution, 1, 1]);
    let n = mesh.vertices.len();
    let springs = SpringSystem::lattice_springs(&mesh.vertices, &mesh.lattice, &forward_offsets_3d(), p.stiffness);
    let sys = SpringSystem {
        x: mesh.vertices.clone(),
        v: vec![Vec3::zeros(); n],
        mass: vec![p.mass / n as f64; n],
        pinned: mesh.lattice.iter().map(|c| c[0] == 0).collect(),
        springs,
        gravity: Vec3::new(0.0, 0.0, -p.gravity),
        damping: p.damping,
    };
    run_springs(spec, mesh, sys)
}

/// Horizontal sheet pinned at two corners of one edge, falling and swinging.
fn cloth(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    let (g, p) = (&spec.geometry, &spec.physics);
    let cells = [g.resolution, ((g.resolution as f64 * g.width / g.length).round() as usize).max(1)];
    let mesh = grid_sheet(Vec3::zeros(), [g.length, g.width], cells);
    let n = mesh.vertices.len();
    let reach = [[1, 0, 0], [0, 1, 0], [1, 1, 0], [-1, 1, 0]];
    let springs = SpringSystem::lattice_springs(&mesh.vertices, &mesh.lattice, &reach, p.stiffness);
    let pinned = mesh.lattice.iter().map(|c| c[1] == 0 && (c[0] == 0 || c[0] == cells[0])).collect();
    let sys = SpringSystem {
        x: mesh.vertices.clone(),
        v: vec![Vec3::zeros(); n],
        mass: vec![p.mass / n as f64; n],
        pinned,
        springs,
        gravity: Vec3::new(0.0, 0.0, -p.gravity),
        damping: p.damping,
    };
    run_springs(spec, mesh, sys)
}

/// Cube in ballistic flight with constant spin about its centre.
/// Isotropic inertia makes constant angular velocity exact.
fn free_rigid(spec: &ScenarioSpec) -> Result<(Trajectory, GenerationReport)> {
    let (g, p) = (&spec.geometry, &spec.physics);
    let h = g.length / 2.0;
    let mesh = box_mesh(Vec3::repeat(-h), Vec3::repeat(h), [g.resolution; 3]);
    let v0 = Vec3::from(p.velocity);
    let w = Vec3::from(p.spin);
    let grav = Vec3::new(0.0, 0.0, -p.gravity);
    let frames_v = (0..spec.frame_count())
        .map(|i| {
            let t = spec.dt * i as f64;
            let rot = UnitQuaternion::from_scaled_axis(w * t);
            let c = v0 * t + grav * (0.5 * t * t);
            mesh.vertices.iter().map(|x| rot * x + c).collect()
        })
        .collect();
    let traj = Trajectory::new(mesh.faces, frames_v, spec.dt)?;
    Ok((traj, GenerationReport { substep: spec.dt, energy_drift: None, angles: None }))
}
