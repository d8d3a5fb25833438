//! Inverse kinematics: find the chart state whose driven mesh best matches
//! a target shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::LatentMap;
use crate::error::{Error, Result};
use crate::geometry::{chamfer, nearest_neighbors, sample_surface, unflatten, voxel_iou, Mesh, SurfaceSamples, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Random starts drawn from the prior, in addition to the chart origin.
    pub prior_starts: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub iou_resolution: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self { iterations: 150, lr: 0.05, prior_starts: 4, n_samples: 512, seed: 0, iou_resolution: 32 }
    }
}

impl IkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("ik lr must be positive, got {}", self.lr)));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("ik n_samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub chamfer_l1: f64,
    pub chamfer_l2: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IkResult {
    pub q: Vec<f64>,
    /// Metrics at the chart origin (the input pose).
    pub initial: ShapeMetrics,
    #[serde(rename = "final")]
    pub best: ShapeMetrics,
    /// 0 is the origin, `i > 0` the i-th prior draw.
    pub start: usize,
    /// Every start blew up; `best` then repeats `initial`.
    pub diverged: bool,
}

/// Compares a driven mesh with a target by Chamfer distance on surface
/// samples plus voxel IoU.
pub struct ShapeScorer<'a> {
    faces: &'a [[usize; 3]],
    anchors: SurfaceSamples,
    target_mesh: &'a Mesh,
    target: Vec<Vec3>,
    iou_resolution: usize,
}

impl<'a> ShapeScorer<'a> {
    /// Samples `input` (the mesh the map drives). A target with the same
    /// faces reuses the anchors; any other target is sampled independently.
    pub fn new(input: &'a Mesh, target: &'a Mesh, n_samples: usize, seed: u64, iou_resolution: usize) -> Result<Self> {
        let anchors = sample_surface(input, n_samples, seed)?;
        let target_pts = if target.faces() == input.faces() {
            anchors.positions_on(target.faces(), target.vertices())
        } else {
            sample_surface(target, n_samples, seed)?.positions().to_vec()
        };
        Ok(Self { faces: input.faces(), anchors, target_mesh: target, target: target_pts, iou_resolution })
    }

    pub fn samples_on(&self, flat: &[f64]) -> Vec<Vec3> {
        self.anchors.positions_on(self.faces, &unflatten(flat))
    }

    pub fn metrics(&self, flat: &[f64]) -> Result<ShapeMetrics> {
        let c = chamfer(&self.samples_on(flat), &self.target)?;
        let mesh = Mesh::new(unflatten(flat), self.faces.to_vec())?;
        let iou = voxel_iou(&mesh, self.target_mesh, self.iou_resolution)?.iou;
        Ok(ShapeMetrics { chamfer_l1: c.l1, chamfer_l2: c.l2, iou })
    }

    /// Chamfer-L2 and its gradient with respect to the flattened vertices.
    pub fn l2_grad(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let pts = self.samples_on(flat);
        let ab = nearest_neighbors(&pts, &self.target);
        let ba = nearest_neighbors(&self.target, &pts);
        let (na, nb) = (pts.len() as f64, self.target.len() as f64);
        let mut gp = vec![Vec3::zeros(); pts.len()];
        let mut loss = 0.0;
        for (i, (j, d)) in ab.iter().enumerate() {
            loss += 0.5 * d / na;
            gp[i] += (pts[i] - self.target[*j]) / na;
        }
        for (j, (i, d)) in ba.iter().enumerate() {
            loss += 0.5 * d / nb;
            gp[*i] += (pts[*i] - self.target[j]) / nb;
        }
        let mut gv = vec![0.0; flat.len()];
        for (a, g) in self.anchors.anchors().iter().zip(&gp) {
            for (corner, w) in self.faces[a.face].iter().zip(a.bary) {
                for c in 0..3 {
                    gv[3 * corner + c] += w * g[c];
                }
            }
        }
        (loss, gv)
    }
}

fn descend(map: &dyn LatentMap, scorer: &ShapeScorer, q0: Vec<f64>, cfg: &IkConfig) -> Result<Option<(Vec<f64>, f64)>> {
    let k = q0.len();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);
    let mut q = q0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for it in 0..=cfg.iterations {
        let x = map.eval(&q)?;
        let (loss, gx) = scorer.l2_grad(&x);
        if !loss.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((q.clone(), loss));
        }
        if it == cfg.iterations {
            break;
        }
        let g = map.vjp(&q, &gx)?;
        if g.iter().any(|x| !x.is_finite()) {
            break;
        }
        let t = (it + 1) as i32;
        for i in 0..k {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            q[i] -= cfg.lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(best)
}

/// Optimizes the chart state against the target from the origin and from
/// `prior_starts` standard-normal draws; the run with the lowest final
/// Chamfer-L1 is kept.
pub fn solve_ik(map: &dyn LatentMap, input: &Mesh, target: &Mesh, cfg: &IkConfig) -> Result<IkResult> {
    cfg.validate()?;
    if input.n_vertices() != map.n_vertices() {
        return Err(Error::invalid(format!(
            "input mesh has {} vertices, map drives {}",
            input.n_vertices(),
            map.n_vertices()
        )));
    }
    let scorer = ShapeScorer::new(input, target, cfg.n_samples, cfg.seed, cfg.iou_resolution)?;
    let k = map.dim();
    let origin = vec![0.0; k];
    let initial = scorer.metrics(&map.eval(&origin)?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = vec![origin.clone()];
    for _ in 0..cfg.prior_starts {
        starts.push((0..k).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    let mut best: Option<(Vec<f64>, ShapeMetrics, usize)> = None;
    for (i, s) in starts.into_iter().enumerate() {
        let Some((q, _)) = descend(map, &scorer, s, cfg)? else {
            log::warn!("ik start {i} diverged");
            continue;
        };
        let m = scorer.metrics(&map.eval(&q)?)?;
        if best.as_ref().is_none_or(|b| m.chamfer_l1 < b.1.chamfer_l1) {
            best = Some((q, m, i));
        }
    }
    Ok(match best {
        Some((q, m, start)) => IkResult { q, initial, best: m, start, diverged: false },
        None => IkResult { q: origin, initial, best: initial, start: 0, diverged: true },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MlpMap;
    use crate::geometry::flatten;

    fn cube(s: f64) -> Mesh {
        let v: Vec<Vec3> = (0..8).map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * s).collect();
        let f = vec![
            [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
            [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
        ];
        Mesh::new(v, f).unwrap()
    }

    /// Small map driving the cube: rest shape plus a random MLP perturbation.
    struct Perturbed {
        mlp: MlpMap,
        offset: Vec<f64>,
    }

    impl Perturbed {
        fn new(rest: &Mesh) -> Self {
            let mlp = MlpMap::random(2, 6, 8, 5);
            let at0 = mlp.eval(&[0.0, 0.0]).unwrap();
            let offset = flatten(rest.vertices()).iter().zip(&at0).map(|(r, a)| r - a).collect();
            Self { mlp, offset }
        }
    }

    impl LatentMap for Perturbed {
        fn dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            24
        }
        fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
            Ok(self.mlp.eval(q)?.iter().zip(&self.offset).map(|(a, b)| a + b).collect())
        }
        fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
            let (_, j) = self.mlp.jacobian(q)?;
            Ok((self.eval(q)?, j))
        }
        fn vjp(&self, q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
            self.mlp.vjp(q, w)
        }
    }

    #[test]
    fn chamfer_gradient_matches_fd() {
        let m = cube(1.0);
        let t = cube(1.2);
        let scorer = ShapeScorer::new(&m, &t, 64, 3, 16).unwrap();
        let x: Vec<f64> = flatten(m.vertices()).iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).sin()).collect();
        let (_, g) = scorer.l2_grad(&x);
        for i in [0, 5, 13, 23] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-7;
            xm[i] -= 1e-7;
            let fd = (scorer.l2_grad(&xp).0 - scorer.l2_grad(&xm).0) / 2e-7;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn self_target_is_exact() {
        let m = cube(1.0);
        let map = Perturbed::new(&m);
        let r = solve_ik(&map, &m, &m, &IkConfig { iterations: 20, ..Default::default() }).unwrap();
        assert!(r.initial.chamfer_l1 < 1e-12);
        assert!(r.best.chamfer_l1 < 1e-12);
        assert_eq!(r.best.iou, 1.0);
        assert_eq!(r.start, 0);
    }

    #[test]
    fn recovers_constructed_target() {
        let m = cube(1.0);
        let map = Perturbed::new(&m);
        let target = Mesh::new(unflatten(&map.eval(&[0.8, -0.6]).unwrap()), m.faces().to_vec()).unwrap();
        let r = solve_ik(&map, &m, &target, &IkConfig { iterations: 300, ..Default::default() }).unwrap();
        assert!(!r.diverged);
        assert!(r.best.chamfer_l1 < 0.05 * r.initial.chamfer_l1, "{r:?}");
    }

    #[test]
    fn rejects_mismatched_input() {
        let map = Perturbed::new(&cube(1.0));
        let other = Mesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        assert!(solve_ik(&map, &other, &other, &IkConfig::default()).is_err());
    }
}
