//! Ground-truth 4D trajectories, augmentation and dataset splits.

mod scenario;
mod shapes;
mod springs;

use std::path::{Path, PathBuf};

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Trajectory, Vec3};
use crate::io_util;

pub use scenario::{
    generate, generate_with_report, GenerationReport, GeometryParams, PhysicsParams, ScenarioKind, ScenarioSpec,
};
pub use shapes::{box_mesh, grid_sheet, Tessellation};
pub use springs::{Spring, SpringSystem};

/// Ranges for the random similarity transform and jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Rotation angle drawn from `[-rotation, rotation]` about a uniform axis, rad.
    pub rotation: f64,
    /// Per-axis translation drawn from `[-translation, translation]`, m.
    pub translation: f64,
    /// Isotropic scale drawn uniformly from `[scale[0], scale[1]]`.
    pub scale: [f64; 2],
    /// Per-vertex, per-frame Gaussian jitter, m.
    pub jitter: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { rotation: std::f64::consts::PI, translation: 0.5, scale: [0.8, 1.25], jitter: 0.0 }
    }
}

/// `p -> s R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: UnitQuaternion<f64>,
    pub scale: f64,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), scale: 1.0, translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (self.rotation * p) * self.scale + self.translation
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self { rotation: 0.0, translation: 0.0, scale: [1.0, 1.0], jitter: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] > 0.0 && self.scale[1] >= self.scale[0]) {
            return Err(Error::invalid(format!("augmentation.scale must satisfy 0 < lo <= hi, got {:?}", self.scale)));
        }
        if !(self.jitter >= 0.0) || !(self.rotation >= 0.0) || !(self.translation >= 0.0) {
            return Err(Error::invalid("augmentation rotation, translation and jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Similarity {
        let mut s = Similarity::identity();
        if self.rotation > 0.0 {
            let axis: [f64; 3] = UnitSphere.sample(rng);
            let angle = rng.random_range(-self.rotation..=self.rotation);
            s.rotation = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle);
        }
        if self.scale[1] > self.scale[0] {
            s.scale = rng.random_range(self.scale[0]..=self.scale[1]);
        } else {
            s.scale = self.scale[0];
        }
        if self.translation > 0.0 {
            s.translation = Vec3::from_fn(|_, _| rng.random_range(-self.translation..=self.translation));
        }
        s
    }
}

/// One similarity transform for the whole trajectory, then independent jitter.
pub fn augment(traj: &Trajectory, aug: &AugmentationSpec, seed: u64) -> Result<Trajectory> {
    aug.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = aug.sample(&mut rng);
    let mut out = traj.map_vertices(|p| sim.apply(p));
    if aug.jitter > 0.0 {
        let noise = Normal::new(0.0, aug.jitter).map_err(|e| Error::invalid(e.to_string()))?;
        let frames = out
            .frames()
            .iter()
            .map(|f| f.iter().map(|p| p + Vec3::from_fn(|_, _| noise.sample(&mut rng))).collect())
            .collect();
        out = Trajectory::new(out.faces().to_vec(), frames, out.dt())?;
    }
    Ok(out)
}

/// Deterministic split of `n` whole trajectories.
///
/// The test set gets `floor((1 - f) n)` items and the remainder goes to
/// training, clamped so both sides are non-empty. Returned indices are sorted.
pub fn make_split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("a split needs at least 2 trajectories, got {n}")));
    }
    // Tolerance keeps 0.8 * 10 from rounding to 8.000000000000002.
    let n_train = ((train_fraction * n as f64) - 1e-9).ceil().clamp(1.0, (n - 1) as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    /// Directory relative to the index file.
    pub dir: String,
    pub split: Split,
    pub kind: ScenarioKind,
    pub frames: usize,
    pub n_vertices: usize,
    pub dt: f64,
    pub topology_hash: String,
    pub spec: ScenarioSpec,
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub seed: u64,
    pub train_fraction: f64,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let idx: DatasetIndex = io_util::read_json(path)?;
        if idx.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported dataset schema_version {}", idx.schema_version)));
        }
        Ok(idx)
    }

    /// Loads every trajectory with the given split tag.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<(DatasetEntry, Trajectory)>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| Ok((e.clone(), Trajectory::load(&root.join(&e.dir))?)))
            .collect()
    }
}

/// Generates every scenario, writes trajectories under `root`, and writes
/// `root/index.json`. Returns the index and the written trajectory directories.
pub fn write_dataset(
    root: &Path,
    specs: &[ScenarioSpec],
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, Vec<PathBuf>)> {
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate scenario name '{}'", w[0])));
    }
    let (_, test) = make_split(specs.len(), train_fraction, seed)?;
    let mut entries = Vec::with_capacity(specs.len());
    let mut dirs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let traj = generate(spec).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("scenario '{}': {m}", spec.name)),
            other => other,
        })?;
        let rel = format!("trajectories/{}", spec.name);
        let dir = root.join(&rel);
        traj.save(&dir)?;
        entries.push(DatasetEntry {
            name: spec.name.clone(),
            dir: rel,
            split: if test.contains(&i) { Split::Test } else { Split::Train },
            kind: spec.kind,
            frames: traj.len(),
            n_vertices: traj.n_vertices(),
            dt: traj.dt(),
            topology_hash: traj.topology_hash(),
            spec: spec.clone(),
        });
        dirs.push(dir);
    }
    let index = DatasetIndex { schema_version: DATASET_SCHEMA_VERSION, seed, train_fraction, entries };
    io_util::write_json(&root.join("index.json"), &index)?;
    Ok((index, dirs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer;

    fn hinge() -> Trajectory {
        let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 0.5, 0.1);
        s.physics.angular_velocity = 1.0;
        generate(&s).unwrap()
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let t = hinge();
        assert_eq!(augment(&t, &AugmentationSpec::identity(), 3).unwrap(), t);
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let t = hinge();
        let aug = AugmentationSpec { rotation: 3.0, translation: 0.0, scale: [1.0, 1.0], jitter: 0.0 };
        let a = augment(&t, &aug, 5).unwrap();
        assert_ne!(a, t);
        for f in 0..t.len() {
            for i in (0..t.n_vertices()).step_by(7) {
                for j in (0..t.n_vertices()).step_by(5) {
                    let d0 = (t.frame(f)[i] - t.frame(f)[j]).norm();
                    let d1 = (a.frame(f)[i] - a.frame(f)[j]).norm();
                    assert!((d0 - d1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pure_scaling() {
        let t = hinge();
        let aug = AugmentationSpec { rotation: 0.0, translation: 0.0, scale: [2.0, 2.0], jitter: 0.0 };
        let a = augment(&t, &aug, 0).unwrap();
        let doubled: Vec<Vec3> = t.frame(0).iter().map(|p| p * 2.0).collect();
        let c = chamfer(a.frame(0), &doubled).unwrap();
        assert_eq!((c.l1, c.l2), (0.0, 0.0));
    }

    #[test]
    fn jitter_is_per_frame() {
        let t = hinge();
        let aug = AugmentationSpec { jitter: 1e-3, ..AugmentationSpec::identity() };
        let a = augment(&t, &aug, 0).unwrap();
        let d0 = a.frame(0)[0] - t.frame(0)[0];
        let d1 = a.frame(1)[0] - t.frame(1)[0];
        assert!(d0 != d1 && d0.norm() < 1e-2);
        assert!(augment(&t, &AugmentationSpec { scale: [0.0, 1.0], ..AugmentationSpec::identity() }, 0).is_err());
    }

    #[test]
    fn split_rules() {
        let (tr, te) = make_split(10, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(tr.iter().all(|i| !te.contains(i)));
        assert_eq!(make_split(10, 0.8, 1).unwrap(), (tr, te));
        for seed in 0..20 {
            let (tr, te) = make_split(3, 0.5, seed).unwrap();
            assert_eq!((tr.len(), te.len()), (2, 1));
        }
        assert!(make_split(10, 1.0, 0).is_err());
        assert!(make_split(10, 0.0, 0).is_err());
        assert!(make_split(1, 0.5, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            ScenarioSpec::new("a", ScenarioKind::Hinge, 0.2, 0.1),
            ScenarioSpec::new("b", ScenarioKind::Pendulum, 0.2, 0.1),
            ScenarioSpec::new("c", ScenarioKind::FreeRigid, 0.2, 0.1),
        ];
        let (idx, dirs) = write_dataset(dir.path(), &specs, 0.67, 4).unwrap();
        assert_eq!(dirs.len(), 3);
        let back = DatasetIndex::load(&dir.path().join("index.json")).unwrap();
        assert_eq!(back, idx);
        let train = back.load_split(dir.path(), Split::Train).unwrap();
        let test = back.load_split(dir.path(), Split::Test).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        let dup = vec![specs[0].clone(), specs[0].clone()];
        assert!(write_dataset(dir.path(), &dup, 0.5, 0).is_err());
    }
}
