//! Adam training of the cVAE on ordered frame pairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Reduction};
use super::network::{fourier_features, Net, NeurokWeights};
use super::{field_variance, sorted_inputs};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{sample_surface, transfer_deformation, Mesh, Trajectory, Vec3};
use crate::io_util;
use crate::synthdata::AugmentationSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Frame pairs per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Random similarity applied to both frames of each pair.
    pub augmentation: Option<AugmentationSpec>,
    /// Frames with `i % stride == stride / 2` are withheld (0 keeps all).
    pub holdout_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            batch_size: 1,
            seed: 0,
            augmentation: None,
            holdout_stride: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::invalid("train.lr and train.clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        if self.holdout_stride == 1 {
            return Err(Error::invalid("train.holdout_stride of 1 would withhold every frame"));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    pub fn is_holdout(&self, frame: usize) -> bool {
        self.holdout_stride > 1 && frame % self.holdout_stride == self.holdout_stride / 2
    }
}

/// Evenly strided subset of [`frame_pairs`] for every trajectory, at most
/// `per_trajectory` pairs of each kind, tagged with the trajectory index.
pub fn evaluation_pairs(
    data: &[Trajectory],
    cfg: &TrainConfig,
    per_trajectory: usize,
) -> (Vec<(usize, usize, usize)>, Vec<(usize, usize, usize)>) {
    let pick = |v: Vec<(usize, usize)>, ti: usize| -> Vec<(usize, usize, usize)> {
        let stride = v.len().div_ceil(per_trajectory.max(1)).max(1);
        v.into_iter().step_by(stride).map(|(a, b)| (ti, a, b)).collect()
    };
    let mut held_in = Vec::new();
    let mut held_out = Vec::new();
    for (ti, t) in data.iter().enumerate() {
        let (a, b) = frame_pairs(t.len(), cfg);
        held_in.extend(pick(a, ti));
        held_out.extend(pick(b, ti));
    }
    (held_in, held_out)
}

/// Ordered pairs `(a, b)`, `a != b`: training pairs among kept frames, and
/// held-out pairs from a kept frame to a withheld one.
pub fn frame_pairs(n_frames: usize, cfg: &TrainConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let kept: Vec<usize> = (0..n_frames).filter(|i| !cfg.is_holdout(*i)).collect();
    let mut held_in = Vec::new();
    let mut held_out = Vec::new();
    for &a in &kept {
        for b in 0..n_frames {
            if a == b {
                continue;
            }
            if cfg.is_holdout(b) {
                held_out.push((a, b));
            } else {
                held_in.push((a, b));
            }
        }
    }
    (held_in, held_out)
}

/// Adam moments, keyed like the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(weights: &NeurokWeights) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in weights.store.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self { v: m.clone(), m, t: 0 }
    }

    /// One update. `grads` must already be clipped.
    pub fn update(&mut self, weights: &mut ParamStore, grads: &[(String, Tensor)], cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.get_mut(name).ok_or_else(|| Error::Format(format!("optimizer state lacks '{name}'")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Format(format!("optimizer state lacks '{name}'")))?;
            let w = weights.get_mut(name).ok_or_else(|| Error::Format(format!("weights lack '{name}'")))?;
            for (((w, m), v), g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in self.m.iter() {
            s.insert(format!("m/{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            s.insert(format!("v/{n}"), t.clone());
        }
        s
    }

    fn from_store(s: &ParamStore, t: u64) -> Result<Self> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, x) in s.iter() {
            match name.split_once('/') {
                Some(("m", n)) => m.insert(n, x.clone()),
                Some(("v", n)) => v.insert(n, x.clone()),
                _ => return Err(Error::Format(format!("unexpected optimizer tensor '{name}'"))),
            }
        }
        Ok(Self { m, v, t })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: NeurokWeights,
    pub adam: Adam,
    /// Steps completed.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    adam_t: u64,
    weights_sha256: String,
}

const SIDECAR_SCHEMA: u32 = 1;

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let weights = NeurokWeights::init(cfg, seed)?;
        let adam = Adam::new(&weights);
        Ok(Self { weights, adam, step: 0 })
    }

    /// Writes `weights.ckpt`, `optimizer.ckpt` and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self.weights.store.to_bytes();
        io_util::write_atomic(&dir.join("weights.ckpt"), &bytes)?;
        io_util::write_atomic(&dir.join("optimizer.ckpt"), &self.adam.to_store().to_bytes())?;
        let side = Sidecar {
            schema_version: SIDECAR_SCHEMA,
            model: model.clone(),
            train: train.clone(),
            step: self.step,
            adam_t: self.adam.t,
            weights_sha256: io_util::sha256_hex(&bytes),
        };
        io_util::write_json(&dir.join("checkpoint.json"), &side)
    }

    /// Loads a saved state and the configs it was trained with.
    pub fn load(dir: &Path) -> Result<(Self, ModelConfig, TrainConfig)> {
        let side: Sidecar = io_util::read_json(&dir.join("checkpoint.json"))?;
        if side.schema_version != SIDECAR_SCHEMA {
            return Err(Error::Format(format!("unsupported checkpoint schema_version {}", side.schema_version)));
        }
        let weights = NeurokWeights { store: ParamStore::load(&dir.join("weights.ckpt"))? };
        weights.check(&side.model)?;
        let adam = match dir.join("optimizer.ckpt") {
            p if p.exists() => Adam::from_store(&ParamStore::load(&p)?, side.adam_t)?,
            _ => Adam::new(&weights),
        };
        Ok((Self { weights, adam, step: side.step }, side.model, side.train))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<LossRecord>,
    /// A non-finite loss or gradient stopped training; `state` is the last finite one.
    pub diverged: bool,
}

struct Example {
    points: Vec<Vec3>,
    field: Vec<f64>,
    eps: Vec<f64>,
}

fn draw_example(data: &[Trajectory], kept: &[Vec<usize>], cfg: &ModelConfig, tcfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Example> {
    let ti = rng.random_range(0..data.len());
    let frames = &kept[ti];
    let a = frames[rng.random_range(0..frames.len())];
    let mut b = frames[rng.random_range(0..frames.len() - 1)];
    if b >= a {
        b = frames[frames.iter().position(|f| *f == b).unwrap() + 1];
    }
    let traj = &data[ti];
    let (mut fa, mut fb) = (traj.frame(a).to_vec(), traj.frame(b).to_vec());
    if let Some(aug) = &tcfg.augmentation {
        let sim = aug.sample(rng);
        fa.iter_mut().for_each(|p| *p = sim.apply(p));
        fb.iter_mut().for_each(|p| *p = sim.apply(p));
    }
    let mesh = Mesh::new(fa, traj.faces().to_vec())?;
    let samples = sample_surface(&mesh, cfg.n_sample, rng.random())?;
    let field = transfer_deformation(&samples, mesh.faces(), mesh.vertices(), &fb, cfg.mode())?;
    let (points, field) = sorted_inputs(samples.positions(), field.values(), cfg.d_deform);
    let eps = (0..cfg.latent_dim()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Example { points, field, eps })
}

/// Adds one example's loss terms to the graph; returns `(loss, recon, kl)`.
fn example_loss(net: &mut Net, ex: &Example, cfg: &ModelConfig) -> Result<(Var, Var, Var)> {
    let n = ex.points.len();
    let f = net.g.constant(fourier_features(&ex.points, cfg.bands));
    let d = net.g.constant(Tensor::new(vec![n, cfg.d_deform], ex.field.clone())?);
    let eps = net.g.constant(Tensor::vector(ex.eps.clone()));
    let mu_p = net.prior(f, cfg)?;
    let (mu_q, lv) = net.posterior(f, d, cfg)?;
    let g = &mut *net.g;
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    let z = g.add(mu_q, noise)?;
    let pred = net.decode(z, f, cfg)?;
    let g = &mut *net.g;
    let diff = g.sub(pred, d)?;
    let sq = g.square(diff)?;
    let recon = match cfg.recon_reduction {
        Reduction::Sum => g.sum(sq),
        Reduction::Mean => g.mean(sq),
    };
    // 0.5 * sum(exp(lv) + (mu_q - mu_p)^2 - 1 - lv)
    let var = g.exp(lv);
    let dm = g.sub(mu_q, mu_p)?;
    let dm2 = g.square(dm)?;
    let t = g.add(var, dm2)?;
    let t = g.sub(t, lv)?;
    let s = g.sum(t);
    let s = g.scale(s, 0.5);
    let one = g.constant(Tensor::scalar(0.5 * cfg.latent_dim() as f64));
    let kl = g.sub(s, one)?;
    let wkl = g.scale(kl, cfg.lambda);
    let loss = g.add(recon, wkl)?;
    Ok((loss, recon, kl))
}

/// Per-step generator: independent of how many steps ran before.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Builds the batch loss graph for one step. Returns the graph and the
/// `(loss, recon, kl)` nodes averaged over the batch.
pub fn batch_graph(
    weights: &NeurokWeights,
    data: &[Trajectory],
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    step: usize,
) -> Result<(Graph, Var, Var, Var)> {
    let kept = kept_frames(data, tcfg)?;
    let mut rng = step_rng(tcfg.seed, step);
    let examples = (0..tcfg.batch_size).map(|_| draw_example(data, &kept, cfg, tcfg, &mut rng)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let mut net = Net::new(&mut g, weights, cfg);
    let mut terms = Vec::new();
    for ex in &examples {
        terms.push(example_loss(&mut net, ex, cfg)?);
    }
    let inv = 1.0 / examples.len() as f64;
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = (g.add(acc.0, t.0)?, g.add(acc.1, t.1)?, g.add(acc.2, t.2)?);
    }
    let (l, r, k) = (g.scale(acc.0, inv), g.scale(acc.1, inv), g.scale(acc.2, inv));
    Ok((g, l, r, k))
}

fn kept_frames(data: &[Trajectory], tcfg: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    data.iter()
        .enumerate()
        .map(|(i, t)| {
            let kept: Vec<usize> = (0..t.len()).filter(|f| !tcfg.is_holdout(*f)).collect();
            if kept.len() < 2 {
                return Err(Error::invalid(format!("training trajectory {i} has fewer than 2 usable frames")));
            }
            Ok(kept)
        })
        .collect()
}

/// Runs `tcfg.steps` optimizer steps starting from `state` (or a fresh
/// initialization seeded by `tcfg.seed`).
pub fn train(data: &[Trajectory], cfg: &ModelConfig, tcfg: &TrainConfig, state: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    kept_frames(data, tcfg)?;
    let mut state = match state {
        Some(s) => {
            s.weights.check(cfg)?;
            s
        }
        None => TrainState::new(cfg, tcfg.seed)?,
    };
    let mut curve = Vec::with_capacity(tcfg.steps);
    let end = state.step + tcfg.steps;
    while state.step < end {
        let (g, loss, recon, kl) = batch_graph(&state.weights, data, cfg, tcfg, state.step)?;
        let rec = LossRecord {
            step: state.step,
            loss: g.value(loss).data()[0],
            recon: g.value(recon).data()[0],
            kl: g.value(kl).data()[0],
        };
        if !rec.loss.is_finite() {
            log::warn!("loss became non-finite at step {}; keeping the last finite weights", state.step);
            return Ok(TrainOutcome { state, curve, diverged: true });
        }
        let mut grads = g.backward(loss)?.named(&g);
        let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            log::warn!("gradient became non-finite at step {}; keeping the last finite weights", state.step);
            return Ok(TrainOutcome { state, curve, diverged: true });
        }
        if norm > tcfg.clip {
            let s = tcfg.clip / norm;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        state.adam.update(&mut state.weights.store, &grads, tcfg)?;
        curve.push(rec);
        state.step += 1;
        if state.step % 500 == 0 {
            log::info!("step {} loss {:.4e} recon {:.4e} kl {:.3}", state.step, rec.loss, rec.recon, rec.kl);
        }
    }
    Ok(TrainOutcome { state, curve, diverged: false })
}

/// Reconstruction quality over a set of `(trajectory, a, b)` pairs using
/// the posterior mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub pairs: usize,
    pub mse: f64,
    /// Variance of the target fields about their per-channel means.
    pub variance: f64,
}

impl PairEval {
    pub fn ratio(&self) -> f64 {
        self.mse / self.variance.max(1e-300)
    }
}

pub fn evaluate_pairs(
    weights: &NeurokWeights,
    cfg: &ModelConfig,
    data: &[Trajectory],
    pairs: &[(usize, usize, usize)],
    seed: u64,
) -> Result<PairEval> {
    if pairs.is_empty() {
        return Err(Error::invalid("no frame pairs to evaluate"));
    }
    let mut targets = Vec::new();
    let mut se = 0.0;
    for (i, &(ti, a, b)) in pairs.iter().enumerate() {
        let traj = data.get(ti).ok_or_else(|| Error::invalid(format!("pair {i} names trajectory {ti} out of range")))?;
        if a >= traj.len() || b >= traj.len() {
            return Err(Error::invalid(format!("pair {i} names a frame out of range")));
        }
        let mesh = traj.mesh(a);
        let samples = sample_surface(&mesh, cfg.n_sample, seed.wrapping_add(i as u64))?;
        let field = transfer_deformation(&samples, traj.faces(), traj.frame(a), traj.frame(b), cfg.mode())?;
        let q = super::encode_posterior(&field, &samples, weights, cfg)?;
        let pred = super::decode_points(&q.mean, samples.positions(), weights, cfg)?;
        se += field.values().iter().zip(pred.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        targets.extend_from_slice(field.values());
    }
    Ok(PairEval { pairs: pairs.len(), mse: se / targets.len() as f64, variance: field_variance(&targets, cfg.d_deform) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, ScenarioKind, ScenarioSpec};

    fn tiny() -> ModelConfig {
        ModelConfig { tokens: 2, token_dim: 2, pos_dim: 4, bands: 1, n_sample: 6, blocks: 1, heads: 1, d_deform: 3, ..Default::default() }
    }

    fn hinge(frames: usize) -> Trajectory {
        let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 0.1 * (frames - 1) as f64, 0.1);
        s.geometry.resolution = 2;
        s.physics.angular_velocity = 1.0;
        generate(&s).unwrap()
    }

    #[test]
    fn pair_lists() {
        let c = TrainConfig { holdout_stride: 4, ..Default::default() };
        let (a, b) = frame_pairs(8, &c);
        // Frames 2 and 6 withheld.
        assert_eq!(a.len(), 6 * 5);
        assert_eq!(b.len(), 6 * 2);
        assert!(b.iter().all(|(x, y)| !c.is_holdout(*x) && c.is_holdout(*y)));
        assert!(frame_pairs(3, &TrainConfig::default()).1.is_empty());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let data = vec![hinge(4)];
        let tcfg = TrainConfig { batch_size: 2, seed: 3, ..Default::default() };
        let w = NeurokWeights::init(&cfg, 1).unwrap();
        let (g, loss, _, _) = batch_graph(&w, &data, &cfg, &tcfg, 0).unwrap();
        let grads = g.backward(loss).unwrap().named(&g);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (name, grad) in &grads {
            for i in 0..grad.len() {
                let eval = |delta: f64| {
                    let mut w2 = w.clone();
                    w2.store.get_mut(name).unwrap().data_mut()[i] += delta;
                    let (g2, l2, _, _) = batch_graph(&w2, &data, &cfg, &tcfg, 0).unwrap();
                    g2.value(l2).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = grad.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny();
        let data = vec![hinge(5)];
        let tcfg = TrainConfig { steps: 6, seed: 11, ..Default::default() };
        let a = train(&data, &cfg, &tcfg, None).unwrap();
        let b = train(&data, &cfg, &tcfg, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.state, b.state);
        assert!(!a.diverged);

        let half = TrainConfig { steps: 3, ..tcfg.clone() };
        let first = train(&data, &cfg, &half, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        first.state.save(dir.path(), &cfg, &half).unwrap();
        let (loaded, mcfg, _) = TrainState::load(dir.path()).unwrap();
        assert_eq!(loaded, first.state);
        assert_eq!(mcfg, cfg);
        let second = train(&data, &cfg, &half, Some(loaded)).unwrap();
        assert_eq!(second.state, a.state);
        assert_eq!(&a.curve[3..], second.curve.as_slice());
    }

    #[test]
    fn rejects_unusable_data() {
        let cfg = tiny();
        assert!(train(&[], &cfg, &TrainConfig::default(), None).is_err());
        let short = hinge(2);
        let c = TrainConfig { holdout_stride: 2, ..Default::default() };
        assert!(train(&[short], &cfg, &c, None).is_err());
    }
}
