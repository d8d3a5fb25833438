//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neurok_cli::config::{self, GenDataConfig, TrainFileConfig};
use neurok_core::autodiff::gradcheck::{gradient_errors, op_suite};
use neurok_core::dynamics::{
    fit_boundary, measured_period, quadratic_velocity_term, simulate, BoundaryTargets, DynamicState, FitOptions,
    LatentAnchor, LatentMap, MlpMap, NeurokMap, PendulumMap, PotentialSpec, QuadraticRoute, SimConfig,
};
use neurok_core::geometry::{Mesh, Trajectory};
use neurok_core::ik::{solve_ik, IkConfig, IkResult};
use neurok_core::model::{batch_graph, evaluate_pairs, evaluation_pairs, train, ModelConfig, NeurokWeights, TrainConfig};
use neurok_core::reduction::{compute_active_subspace, principal_angle, ReducedChart, ReductionConfig};
use neurok_core::synthdata::{generate, ScenarioKind, ScenarioSpec};

const G: f64 = 9.81;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- oracles

/// Scalar RK4 on `theta'' = -(g/L) sin theta`; returns theta at every step.
fn pendulum_oracle(theta0: f64, length: f64, dt: f64, steps: usize) -> Vec<f64> {
    let f = |th: f64| -(G / length) * th.sin();
    let (mut th, mut w) = (theta0, 0.0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(th);
    for _ in 0..steps {
        let (k1x, k1v) = (w, f(th));
        let (k2x, k2v) = (w + 0.5 * dt * k1v, f(th + 0.5 * dt * k1x));
        let (k3x, k3v) = (w + 0.5 * dt * k2v, f(th + 0.5 * dt * k2x));
        let (k4x, k4v) = (w + dt * k3v, f(th + dt * k3x));
        th += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        w += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        out.push(th);
    }
    out
}

/// Mean spacing of upward zero crossings of the oracle, without storing the path.
fn oracle_period(theta0: f64, dt: f64, t_end: f64) -> Option<f64> {
    let f = |th: f64| -(G / 1.0) * th.sin();
    let (mut th, mut w) = (theta0, 0.0);
    let mut crossings = Vec::new();
    let steps = (t_end / dt).round() as usize;
    for i in 0..steps {
        let (k1x, k1v) = (w, f(th));
        let (k2x, k2v) = (w + 0.5 * dt * k1v, f(th + 0.5 * dt * k1x));
        let (k3x, k3v) = (w + 0.5 * dt * k2v, f(th + 0.5 * dt * k2x));
        let (k4x, k4v) = (w + dt * k3v, f(th + dt * k3x));
        let next = th + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        w += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if th < 0.0 && next >= 0.0 {
            crossings.push((i as f64 + -th / (next - th)) * dt);
        }
        th = next;
    }
    (crossings.len() >= 2).then(|| (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

fn pendulum_run(theta0: f64, dt: f64, steps: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let map = PendulumMap { length: 1.0 };
    let spec = PotentialSpec { mass: 1.0, gravity: [0.0, 0.0, -G], ..Default::default() };
    let cfg = SimConfig { dt, steps, metric_eps: Some(0.0), ..Default::default() };
    let init = DynamicState { q: vec![theta0], qdot: vec![0.0], t: 0.0 };
    let sim = simulate(&map, &init, &spec, &cfg)?;
    if let Some(e) = sim.failure {
        return Err(e.into());
    }
    let t = sim.states.iter().map(|s| s.t).collect();
    let q = sim.states.iter().map(|s| s.q[0]).collect();
    Ok((t, q, sim.energy.relative_drift()))
}

// ---------------------------------------------------------------- toy benchmark

struct Trained {
    weights: NeurokWeights,
    model: ModelConfig,
}

struct Toy {
    data: Vec<Trajectory>,
    names: Vec<String>,
    train: TrainFileConfig,
    reduce: ReductionConfig,
    ik: IkConfig,
    no_aug: Option<Trained>,
}

impl Toy {
    fn load() -> Result<Self> {
        let root = repo().join("configs");
        let gen: GenDataConfig = config::load(&root.join("toy_data.json"))?;
        let train: TrainFileConfig = config::load(&root.join("toy_train.json"))?;
        let reduce: neurok_cli::config::ReduceFileConfig = config::load(&root.join("toy_reduce.json"))?;
        let ik: neurok_cli::config::EvalIkFileConfig = config::load(&root.join("toy_ik.json"))?;
        let data = gen.scenarios.iter().map(generate).collect::<neurok_core::Result<Vec<_>>>()?;
        let names = gen.scenarios.iter().map(|s| s.name.clone()).collect();
        Ok(Self { data, names, train, reduce: reduce.reduction, ik: ik.ik, no_aug: None })
    }

    fn fit(&self, model: &ModelConfig, tcfg: &TrainConfig) -> Result<Trained> {
        let out = train(&self.data, model, tcfg, None)?;
        ensure!(!out.diverged, "training diverged at step {}", out.state.step);
        Ok(Trained { weights: out.state.weights, model: model.clone() })
    }

    fn no_aug(&mut self) -> Result<&Trained> {
        if self.no_aug.is_none() {
            let tcfg = TrainConfig { augmentation: None, ..self.train.train.clone() };
            self.no_aug = Some(self.fit(&self.train.model, &tcfg)?);
        }
        Ok(self.no_aug.as_ref().expect("just trained"))
    }

    fn trajectory(&self, name: &str) -> Result<&Trajectory> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| anyhow!("no scenario {name}"))?;
        Ok(&self.data[i])
    }

    fn rest(&self) -> Result<Mesh> {
        Ok(self.trajectory("hinge_a")?.mesh(0))
    }

    /// Held-out hinge poses (frames 2 mod 4) cycling over the three hinges.
    fn targets(&self) -> Result<Vec<Mesh>> {
        let hinges = ["hinge_a", "hinge_b", "hinge_c"];
        (0..10).map(|j| Ok(self.trajectory(hinges[j % 3])?.mesh(2 + 4 * j))).collect()
    }

    fn chart(&self, t: &Trained) -> Result<ReducedChart> {
        Ok(compute_active_subspace(&self.rest()?, &t.weights, &t.model, &self.reduce, 0)?)
    }

    fn ik(&self, t: &Trained, chart: ReducedChart) -> Result<Vec<IkResult>> {
        let rest = self.rest()?;
        let map = NeurokMap::new(&rest, &t.weights, &t.model, chart, 0)?;
        let mut out = Vec::new();
        for target in self.targets()? {
            out.push(solve_ik(&map, &rest, &target, &self.ik)?);
        }
        Ok(out)
    }
}

fn mean_final_l1(r: &[IkResult]) -> f64 {
    r.iter().map(|r| r.best.chamfer_l1).sum::<f64>() / r.len() as f64
}

/// Small decoder trained briefly on one hinge; cheap enough to integrate 10^4 steps.
fn small_decoder() -> Result<(Mesh, Trained)> {
    let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 2.0, 0.05);
    s.physics.angular_velocity = 0.9;
    s.geometry.resolution = 4;
    let data = vec![generate(&s)?];
    let model = ModelConfig {
        tokens: 4,
        token_dim: 2,
        pos_dim: 16,
        bands: 4,
        n_sample: 64,
        blocks: 1,
        heads: 2,
        d_deform: 8,
        ..Default::default()
    };
    let out = train(&data, &model, &TrainConfig { steps: 2000, seed: 1, ..Default::default() }, None)?;
    ensure!(!out.diverged, "small decoder training diverged");
    Ok((data[0].mesh(0), Trained { weights: out.state.weights, model }))
}

// ---------------------------------------------------------------- criteria

fn c1_autodiff() -> Result<Outcome> {
    let (mut rev, mut fwd) = (0.0f64, 0.0f64);
    let mut worst = String::new();
    let suite = op_suite();
    for case in &suite {
        let (r, f) = gradient_errors(&*case.build, case.inputs.clone())?;
        if r.max(f) > rev.max(fwd) {
            worst = case.name.to_string();
        }
        rev = rev.max(r);
        fwd = fwd.max(f);
    }

    let cfg = ModelConfig { tokens: 2, token_dim: 2, pos_dim: 4, bands: 1, n_sample: 6, blocks: 1, heads: 1, d_deform: 8, ..Default::default() };
    let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 0.3, 0.1);
    s.geometry.resolution = 2;
    s.physics.angular_velocity = 1.0;
    let data = vec![generate(&s)?];
    let tcfg = TrainConfig { batch_size: 2, seed: 3, ..Default::default() };
    let w = NeurokWeights::init(&cfg, 1)?;
    let (g, loss, _, _) = batch_graph(&w, &data, &cfg, &tcfg, 0)?;
    let grads = g.backward(loss)?.named(&g);
    let h = 1e-6;
    let mut loss_err = 0.0f64;
    for (name, grad) in &grads {
        for i in 0..grad.len() {
            let at = |delta: f64| -> Result<f64> {
                let mut w2 = w.clone();
                w2.store.get_mut(name).ok_or_else(|| anyhow!("missing {name}"))?.data_mut()[i] += delta;
                let (g2, l2, _, _) = batch_graph(&w2, &data, &cfg, &tcfg, 0)?;
                Ok(g2.value(l2).data()[0])
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            let a = grad.data()[i];
            loss_err = loss_err.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
        }
    }
    let worst_all = rev.max(fwd).max(loss_err);
    outcome(
        worst_all < 1e-5,
        format!(
            "{} ops: reverse {rev:.1e}, forward {fwd:.1e} (worst {worst}); loss on 2-sample batch {loss_err:.1e}",
            suite.len()
        ),
    )
}

fn c2_christoffel() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let k = 1 + draw % 4;
        let n = 5 + (draw * 7) % 26;
        let map = MlpMap::random(k, 8, n, draw as u64);
        let q: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qdot: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fd = SimConfig { route: QuadraticRoute::DirectionalFd, ..Default::default() };
        let full = SimConfig { route: QuadraticRoute::FullHessian, ..Default::default() };
        let a = quadratic_velocity_term(&map, &q, &qdot, 1.0, &fd)?;
        let b = quadratic_velocity_term(&map, &q, &qdot, 1.0, &full)?;
        let num = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    outcome(worst < 1e-4, format!("100 draws, k_q 1..4, n 5..30: max relative difference {worst:.2e}"))
}

fn c3_energy() -> Result<Outcome> {
    let (_, _, pend) = pendulum_run(1.0, 1e-3, 10_000)?;

    let (mesh, dec) = small_decoder()?;
    let rcfg = ReductionConfig { k_q: Some(2), n_mc: Some(200), ..Default::default() };
    let chart = compute_active_subspace(&mesh, &dec.weights, &dec.model, &rcfg, 0)?;
    let z_rest = chart.base().to_vec();
    let map = NeurokMap::new(&mesh, &dec.weights, &dec.model, chart, 0)?;
    let spec = PotentialSpec { anchor: Some(LatentAnchor { z_rest, stiffness: 1.0 }), ..Default::default() };
    let cfg = SimConfig { dt: 1e-3, steps: 10_000, ..Default::default() };
    let sim = simulate(&map, &DynamicState::at_rest(2), &spec, &cfg)?;
    if let Some(e) = sim.failure {
        bail!("decoder run failed: {e}");
    }
    let swing = sim.states.iter().flat_map(|s| s.q.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let dec_drift = sim.energy.relative_drift();
    outcome(
        pend < 1e-3 && dec_drift < 1e-2 && swing > 1e-3,
        format!("pendulum drift {pend:.1e}; trained decoder (k_q 2, max |q| {swing:.2}) drift {dec_drift:.1e}"),
    )
}

fn c4_newton() -> Result<Outcome> {
    let (t, q, _) = pendulum_run(0.1, 1e-3, 10_000)?;
    let small = measured_period(&t, &q).ok_or_else(|| anyhow!("no oscillation"))?;
    let analytic = 2.0 * std::f64::consts::PI * (1.0 / G).sqrt();
    let e_small = (small / analytic - 1.0).abs();

    let (t, q, _) = pendulum_run(1.0, 1e-3, 10_000)?;
    let large = measured_period(&t, &q).ok_or_else(|| anyhow!("no oscillation"))?;
    let reference = oracle_period(1.0, 1e-6, 10.0).ok_or_else(|| anyhow!("reference did not oscillate"))?;
    let e_large = (large / reference - 1.0).abs();
    outcome(
        e_small < 0.01 && e_large < 0.005,
        format!("0.1 rad: {small:.5} s vs 2pi sqrt(L/g) {analytic:.5} s ({e_small:.1e}); 1.0 rad: {large:.5} s vs reference {reference:.5} s ({e_large:.1e})"),
    )
}

fn c5_order() -> Result<Outcome> {
    let t_end = 2.0;
    let reference = *pendulum_oracle(1.0, 1.0, 1e-5, 200_000).last().expect("non-empty");
    let mut errs = Vec::new();
    for dt in [0.1, 0.05, 0.025] {
        let steps = (t_end / dt as f64).round() as usize;
        let (_, q, _) = pendulum_run(1.0, dt, steps)?;
        errs.push((q.last().expect("non-empty") - reference).abs());
    }
    let r = [errs[0] / errs[1], errs[1] / errs[2]];
    outcome(
        r.iter().all(|r| *r >= 8.0),
        format!("endpoint errors {:.2e}, {:.2e}, {:.2e}; ratios {:.1}, {:.1}", errs[0], errs[1], errs[2], r[0], r[1]),
    )
}

fn c6_active_subspace() -> Result<Outcome> {
    let model = ModelConfig { tokens: 1, token_dim: 8, pos_dim: 8, bands: 2, n_sample: 32, blocks: 1, heads: 2, d_deform: 8, ..Default::default() };
    let mut w = NeurokWeights::init(&model, 4)?;
    let lat = w.store.get_mut("dec.lat.w").ok_or_else(|| anyhow!("decoder has no latent projection"))?;
    let cols = lat.shape()[1];
    lat.data_mut()[2 * cols..].iter_mut().for_each(|v| *v = 0.0);
    let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 0.1, 0.1);
    s.geometry.resolution = 3;
    let mesh = generate(&s)?.mesh(0);
    let rcfg = ReductionConfig { k_q: Some(2), n_mc: Some(20_000), seed: 6, ..Default::default() };
    let chart = compute_active_subspace(&mesh, &w, &model, &rcfg, 0)?;
    let e12 = DMatrix::from_fn(2, 8, |r, c| if r == c { 1.0 } else { 0.0 });
    let angle = principal_angle(&chart.matrix(), &e12);
    let ev = chart.eigenvalues();
    outcome(angle < 1e-3, format!("principal angle {angle:.1e} rad; eigenvalues {:.2e}, {:.2e}, then {:.1e}", ev[0], ev[1], ev[2]))
}

fn c7_boundary() -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    let (mesh, dec) = small_decoder()?;
    let rcfg = ReductionConfig { k_q: Some(2), n_mc: Some(200), ..Default::default() };
    let chart = compute_active_subspace(&mesh, &dec.weights, &dec.model, &rcfg, 0)?;
    let neurok = NeurokMap::new(&mesh, &dec.weights, &dec.model, chart, 0)?;
    let mlp = MlpMap::random(3, 8, 12, 9);
    let cases: [(&str, &dyn LatentMap, Vec<f64>, Vec<f64>); 2] = [
        ("mlp k_q 3", &mlp, vec![0.4, -0.3, 0.2], vec![1.0, 0.5, -2.0]),
        ("decoder k_q 2", &neurok, vec![0.3, -0.2], vec![0.7, 0.4]),
    ];
    for (name, map, q, qdot) in cases {
        let (x, j) = map.jacobian(&q)?;
        let v = &j * nalgebra::DVector::from_column_slice(&qdot);
        let vertices: Vec<usize> = (0..map.n_vertices()).collect();
        let targets = BoundaryTargets {
            positions: vertices.iter().map(|i| [x[3 * i], x[3 * i + 1], x[3 * i + 2]]).collect(),
            velocities: vertices.iter().map(|i| [v[3 * i], v[3 * i + 1], v[3 * i + 2]]).collect(),
            vertices,
        };
        let fit = fit_boundary(map, &targets, &vec![0.0; q.len()], &FitOptions::default())?;
        let ok = fit.position_residual < 1e-6 && fit.velocity_residual < 1e-8 && fit.iterations <= 200;
        pass &= ok;
        lines.push(format!(
            "{name}: position {:.1e}, velocity {:.1e}, {} iterations",
            fit.position_residual, fit.velocity_residual, fit.iterations
        ));
    }
    outcome(pass, lines.join("; "))
}

fn c8_training(toy: &mut Toy) -> Result<Outcome> {
    let n_max = toy.data.iter().map(|t| t.n_vertices()).max().unwrap_or(0);
    let tcfg = toy.train.train.clone();
    let model = toy.train.model.clone();
    let data = toy.data.clone();
    let t = toy.no_aug()?;
    let (held_in, held_out) = evaluation_pairs(&data, &tcfg, 64);
    let a = evaluate_pairs(&t.weights, &model, &data, &held_in, tcfg.seed)?;
    let b = evaluate_pairs(&t.weights, &model, &data, &held_out, tcfg.seed)?;
    outcome(
        a.ratio() < 0.1 && b.ratio() < 0.3 && n_max <= 600,
        format!(
            "{} trajectories (max {n_max} vertices), {} steps, lambda {}: held-in MSE/var {:.3}, held-out {:.3}",
            data.len(),
            tcfg.steps,
            model.lambda,
            a.ratio(),
            b.ratio()
        ),
    )
}

fn c9_ik(toy: &mut Toy, full: &Trained, chart: &ReducedChart) -> Result<(Outcome, Vec<IkResult>)> {
    let results = toy.ik(full, chart.clone())?;
    let halved = results.iter().filter(|r| r.best.chamfer_l1 < 0.5 * r.initial.chamfer_l1).count();

    let rest = toy.rest()?;
    let map = NeurokMap::new(&rest, &full.weights, &full.model, chart.clone(), 0)?;
    let own = solve_ik(&map, &rest, &rest, &toy.ik)?;
    let ok = halved >= 8 && own.best.chamfer_l1 < 1e-9 && own.best.iou == 1.0;
    let o = Outcome {
        pass: ok,
        detail: format!(
            "{halved}/10 targets halved (mean Chamfer-L1 {:.4} -> {:.4}); self target Chamfer {:.1e}, IoU {:.3}",
            results.iter().map(|r| r.initial.chamfer_l1).sum::<f64>() / 10.0,
            mean_final_l1(&results),
            own.best.chamfer_l1,
            own.best.iou
        ),
    };
    Ok((o, results))
}

fn c10_ablations(toy: &mut Toy, full: &Trained, full_chart: &ReducedChart, full_ik: &[IkResult]) -> Result<Outcome> {
    let base = mean_final_l1(full_ik);
    let no_red = mean_final_l1(&toy.ik(full, ReducedChart::identity(full_chart.base().to_vec()))?);

    let no_aug_model = {
        let t = toy.no_aug()?;
        Trained { weights: t.weights.clone(), model: t.model.clone() }
    };
    let no_aug = mean_final_l1(&toy.ik(&no_aug_model, toy.chart(&no_aug_model)?)?);

    let disp_cfg = ModelConfig { d_deform: 3, ..toy.train.model.clone() };
    let disp_model = toy.fit(&disp_cfg, &toy.train.train)?;
    let disp = mean_final_l1(&toy.ik(&disp_model, toy.chart(&disp_model)?)?);

    let wins = [no_red, no_aug, disp].iter().filter(|a| base <= **a).count();
    outcome(
        wins >= 2,
        format!("mean held-out IK Chamfer-L1: full {base:.4}, no reduction {no_red:.4}, no augmentation {no_aug:.4}, displacement {disp:.4}; full wins {wins}/3"),
    )
}

fn c11_replay() -> Result<Outcome> {
    let bin = env!("CARGO_BIN_EXE_neurok");
    let script = repo().join("scripts/pipeline.sh");
    let tmp = tempfile::tempdir()?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = Command::new("bash")
            .arg(&script)
            .arg(&dir)
            .env("NEUROK_BIN", bin)
            .env("STEPS", "200")
            .env_remove("NEUROK_SEED")
            .output()
            .context("running pipeline script")?;
        ensure!(out.status.success(), "pipeline run {name} failed: {}", String::from_utf8_lossy(&out.stderr));
        runs.push(dir);
    }
    let stages = ["data", "model", "chart", "sim_pendulum", "sim_hinge", "ik"];
    let files = ["run_manifest.json", "metrics.json", "summary.json", "chart.json"];
    let (mut compared, mut differ) = (0, Vec::new());
    for s in stages {
        ensure!(runs[0].join(s).join("run_manifest.json").is_file(), "stage {s} wrote no manifest");
        for f in files {
            let (a, b) = (runs[0].join(s).join(f), runs[1].join(s).join(f));
            if !a.exists() {
                continue;
            }
            compared += 1;
            if std::fs::read(&a)? != std::fs::read(&b)? {
                differ.push(format!("{s}/{f}"));
            }
        }
    }
    outcome(
        differ.is_empty(),
        if differ.is_empty() {
            format!("6 stages, {compared} manifest/metrics files byte-identical across two seeded runs")
        } else {
            format!("differing: {}", differ.join(", "))
        },
    )
}

// ---------------------------------------------------------------- driver

fn report(id: usize, name: &str, start: Instant, limit: Option<f64>, r: Result<Outcome>) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match r {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    if let Some(l) = limit {
        if secs > l {
            pass = false;
            detail.push_str(&format!(" [over the {l:.0} s budget]"));
        }
    }
    println!("{} {id:>2} {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut ok = true;
    macro_rules! run {
        ($id:expr, $name:expr, $limit:expr, $body:expr) => {{
            let t = Instant::now();
            ok &= report($id, $name, t, $limit, $body);
        }};
    }
    run!(1, "autodiff gradients", Some(10.0), c1_autodiff());
    run!(2, "metric/Christoffel routes", Some(30.0), c2_christoffel());
    run!(3, "energy conservation", Some(60.0), c3_energy());
    run!(4, "Newtonian pendulum periods", Some(60.0), c4_newton());
    run!(5, "rk4 order", None, c5_order());
    run!(6, "active subspace recovery", Some(60.0), c6_active_subspace());
    run!(7, "boundary fitting", None, c7_boundary());

    let mut toy = match Toy::load() {
        Ok(t) => Some(t),
        Err(e) => {
            println!("toy benchmark unavailable: {e:#}");
            None
        }
    };
    match toy.as_mut() {
        Some(toy) => {
            run!(8, "cVAE training", Some(1800.0), c8_training(toy));
            let t = Instant::now();
            let full = toy.fit(&toy.train.model.clone(), &toy.train.train.clone());
            let full_secs = t.elapsed().as_secs_f64();
            match full {
                Ok(full) => {
                    let t = Instant::now();
                    let chart = toy.chart(&full);
                    match chart.and_then(|c| c9_ik(toy, &full, &c).map(|r| (c, r))) {
                        Ok((chart, (o, results))) => {
                            ok &= report(9, "inverse kinematics", t, None, Ok(o));
                            run!(10, "ablation orderings", None, c10_ablations(toy, &full, &chart, &results));
                        }
                        Err(e) => {
                            ok &= report(9, "inverse kinematics", t, None, Err(e));
                            ok &= report(10, "ablation orderings", Instant::now(), None, Err(anyhow!("needs criterion 9 results")));
                        }
                    }
                    println!("     (full-config training took {full_secs:.1} s)");
                }
                Err(e) => {
                    ok &= report(9, "inverse kinematics", t, None, Err(e));
                    ok &= report(10, "ablation orderings", Instant::now(), None, Err(anyhow!("full model unavailable")));
                }
            }
        }
        None => {
            for (id, name) in [(8, "cVAE training"), (9, "inverse kinematics"), (10, "ablation orderings")] {
                ok &= report(id, name, Instant::now(), None, Err(anyhow!("toy benchmark unavailable")));
            }
        }
    }
    run!(11, "end-to-end replay", None, c11_replay());

    if !ok {
        std::process::exit(1);
    }
}
