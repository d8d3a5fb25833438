//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use neurok_core::dynamics::{
    export_motion, fit_boundary, measured_period, simulate as run_simulation, DynamicState, LatentMap, LinearMap,
    NeurokMap, PendulumMap,
};
use neurok_core::geometry::Mesh;
use neurok_core::ik::{solve_ik, IkResult};
use neurok_core::io_util;
use neurok_core::model::{evaluate_pairs, evaluation_pairs, train as train_model, PairEval, TrainState};
use neurok_core::reduction::{compute_active_subspace, ReducedChart};
use neurok_core::synthdata::{generate_with_report, write_dataset, DatasetIndex, ScenarioKind, ScenarioSpec};

use crate::config::{self, EvalIkFileConfig, GenDataConfig, MapSpec, ReduceFileConfig, SimulateFileConfig, TrainFileConfig};
use crate::manifest::{RunManifest, Timings};
use crate::{resolve_seed, EvalIkArgs, GenDataArgs, NumericalFailure, ReduceArgs, SimulateArgs, TrainArgs};

fn finish(out: &Path, mut manifest: RunManifest, mut timings: Timings) -> Result<()> {
    timings.lap("write");
    manifest.collect_outputs(out)?;
    manifest.write(out)?;
    timings.write(out)?;
    Ok(())
}

/// Small-angle undamped pendulums must swing with the analytic period.
fn pendulum_self_check(s: &ScenarioSpec) -> Result<()> {
    if s.kind != ScenarioKind::Pendulum || !s.physics.small_angle || s.physics.damping != 0.0 {
        return Ok(());
    }
    let (_, report) = generate_with_report(s).with_context(|| format!("scenario '{}'", s.name))?;
    let angles = report.angles.unwrap_or_default();
    let t: Vec<f64> = (0..angles.len()).map(|i| i as f64 * s.dt).collect();
    let Some(period) = measured_period(&t, &angles) else {
        log::info!("scenario '{}' is too short for a period check", s.name);
        return Ok(());
    };
    let want = 2.0 * std::f64::consts::PI * (s.geometry.length / s.physics.gravity).sqrt();
    if (period / want - 1.0).abs() > 0.01 {
        return Err(NumericalFailure(format!(
            "scenario '{}': pendulum period {period:.5} s differs from 2*pi*sqrt(L/g) = {want:.5} s",
            s.name
        ))
        .into());
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut timings = Timings::start();
    let mut cfg: GenDataConfig = config::load(&a.config)?;
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    if cfg.scenarios.is_empty() {
        bail!("config field `scenarios` is empty");
    }
    for s in &cfg.scenarios {
        pendulum_self_check(s)?;
    }
    timings.lap("self_check");
    let (index, _) = write_dataset(&a.out, &cfg.scenarios, cfg.train_fraction, cfg.seed)?;
    timings.lap("generate");
    let mut m = RunManifest::new("gen-data", cfg.seed, &cfg)?;
    m.input(&a.config)?;
    finish(&a.out, m, timings)?;
    println!("wrote {} trajectories to {}", index.entries.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct PairReport {
    pairs: usize,
    mse: f64,
    variance: f64,
    ratio: f64,
}

impl From<PairEval> for PairReport {
    fn from(e: PairEval) -> Self {
        Self { pairs: e.pairs, mse: e.mse, variance: e.variance, ratio: e.ratio() }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut timings = Timings::start();
    let mut fc = match &a.config {
        Some(p) => config::load(p)?,
        None => TrainFileConfig::default(),
    };
    if let Some(s) = a.steps {
        fc.train.steps = s;
    }
    if let Some(lr) = a.lr {
        fc.train.lr = lr;
    }
    fc.train.seed = resolve_seed(a.seed, fc.train.seed)?;
    let resume = match &a.resume {
        Some(dir) => {
            let (state, model, _) = TrainState::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            // Architecture comes from the checkpoint.
            fc.model = model;
            Some(state)
        }
        None => None,
    };
    if let Some(l) = a.lambda {
        fc.model.lambda = l;
    }
    fc.model.validate()?;
    fc.train.validate()?;

    let index_path = a.data.join("index.json");
    let index = DatasetIndex::load(&index_path)?;
    let mut data = Vec::new();
    for e in index.entries.iter().filter(|e| fc.splits.contains(&e.split)) {
        data.push(neurok_core::geometry::Trajectory::load(&a.data.join(&e.dir))?);
    }
    if data.is_empty() {
        bail!("no trajectories in splits {:?} of {}", fc.splits, index_path.display());
    }
    timings.lap("load");

    let outcome = train_model(&data, &fc.model, &fc.train, resume)?;
    timings.lap("train");
    outcome.state.save(&a.out, &fc.model, &fc.train)?;
    let mut csv = String::from("step,loss,recon,kl\n");
    for r in &outcome.curve {
        writeln!(csv, "{},{},{},{}", r.step, r.loss, r.recon, r.kl)?;
    }
    io_util::write_atomic(&a.out.join("loss.csv"), csv.as_bytes())?;

    let (held_in, held_out) = evaluation_pairs(&data, &fc.train, 64);
    let eval = |pairs: &[(usize, usize, usize)]| -> Result<Option<PairReport>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate_pairs(&outcome.state.weights, &fc.model, &data, pairs, fc.train.seed)?.into()))
    };
    let metrics = serde_json::json!({
        "step": outcome.state.step,
        "final_loss": outcome.curve.last().map(|r| r.loss),
        "diverged": outcome.diverged,
        "held_in": eval(&held_in)?,
        "held_out": eval(&held_out)?,
    });
    io_util::write_json(&a.out.join("metrics.json"), &metrics)?;
    timings.lap("evaluate");

    let mut m = RunManifest::new("train", fc.train.seed, &fc)?;
    m.input(&index_path)?;
    for e in index.entries.iter().filter(|e| fc.splits.contains(&e.split)) {
        m.input(&a.data.join(&e.dir))?;
    }
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    if let Some(p) = &a.resume {
        m.input(&p.join("checkpoint.json"))?;
    }
    finish(&a.out, m, timings)?;
    if outcome.diverged {
        return Err(NumericalFailure(format!("training diverged at step {}", outcome.state.step)).into());
    }
    println!("trained to step {} ({})", outcome.state.step, a.out.display());
    Ok(())
}

pub fn reduce(a: &ReduceArgs) -> Result<()> {
    let mut timings = Timings::start();
    let mut fc = match &a.config {
        Some(p) => config::load(p)?,
        None => ReduceFileConfig::default(),
    };
    if a.k_q.is_some() {
        fc.reduction.k_q = a.k_q;
    }
    if let Some(t) = a.threshold {
        fc.reduction.threshold = t;
    }
    if a.n_mc.is_some() {
        fc.reduction.n_mc = a.n_mc;
    }
    fc.reduction.seed = resolve_seed(a.seed, fc.reduction.seed)?;
    let (state, model, _) = TrainState::load(&a.checkpoint)?;
    let mesh = Mesh::load_obj(&a.mesh)?;
    timings.lap("load");
    let chart = compute_active_subspace(&mesh, &state.weights, &model, &fc.reduction, fc.sample_seed)?;
    timings.lap("reduce");

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    chart.save(&a.out.join("chart.bin"))?;
    let total: f64 = chart.eigenvalues().iter().sum();
    let mut csv = String::from("index,eigenvalue,cumulative_fraction\n");
    let mut acc = 0.0;
    for (i, l) in chart.eigenvalues().iter().enumerate() {
        acc += l;
        writeln!(csv, "{i},{l},{}", if total > 0.0 { acc / total } else { 1.0 })?;
    }
    io_util::write_atomic(&a.out.join("eigenvalues.csv"), csv.as_bytes())?;
    let summary = serde_json::json!({
        "k": chart.k(),
        "k_q": chart.k_q(),
        "captured": chart.captured(),
        "eigenvalue_sum": total,
    });
    io_util::write_json(&a.out.join("chart.json"), &summary)?;

    let mut m = RunManifest::new("reduce", fc.reduction.seed, &fc)?;
    m.input(&a.checkpoint.join("checkpoint.json"))?;
    m.input(&a.mesh)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    finish(&a.out, m, timings)?;
    println!("k_q = {} of {} ({:.4} of the spectrum)", chart.k_q(), chart.k(), chart.captured());
    Ok(())
}

struct BuiltMap {
    map: Box<dyn LatentMap>,
    faces: Option<Vec<[usize; 3]>>,
}

fn build_map(spec: &MapSpec, cfg_path: &Path, m: &mut RunManifest) -> Result<BuiltMap> {
    Ok(match spec {
        MapSpec::Pendulum { length } => {
            if !(*length > 0.0) {
                bail!("map.length must be positive, got {length}");
            }
            BuiltMap { map: Box::new(PendulumMap { length: *length }), faces: None }
        }
        MapSpec::Linear { b, offset } => {
            let k = b.first().map_or(0, |r| r.len());
            if k == 0 || b.iter().any(|r| r.len() != k) {
                bail!("map.b must be a non-empty rectangular matrix");
            }
            let mat = DMatrix::from_row_iterator(b.len(), k, b.iter().flatten().copied());
            BuiltMap { map: Box::new(LinearMap::new(mat, offset.clone())?), faces: None }
        }
        MapSpec::Neurok { checkpoint, chart, mesh, sample_seed } => {
            let (ck, ch, me) =
                (config::relative_to(cfg_path, checkpoint), config::relative_to(cfg_path, chart), config::relative_to(cfg_path, mesh));
            let (state, model, _) = TrainState::load(&ck)?;
            let chart = ReducedChart::load(&ch)?;
            let mesh = Mesh::load_obj(&me)?;
            m.input(&ck.join("checkpoint.json"))?;
            m.input(&ch)?;
            m.input(&me)?;
            let faces = mesh.faces().to_vec();
            BuiltMap { map: Box::new(NeurokMap::new(&mesh, &state.weights, &model, chart, *sample_seed)?), faces: Some(faces) }
        }
    })
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut timings = Timings::start();
    let mut fc: SimulateFileConfig = config::load(&a.config)?;
    if let Some(s) = a.steps {
        fc.sim.steps = s;
    }
    if let Some(dt) = a.dt {
        fc.sim.dt = dt;
    }
    if fc.export_every == 0 {
        bail!("export_every must be at least 1");
    }
    let seed = resolve_seed(None, 0)?;
    let mut m = RunManifest::new("simulate", seed, &fc)?;
    m.input(&a.config)?;
    let BuiltMap { map, faces } = build_map(&fc.map, &a.config, &mut m)?;
    let k = map.dim();
    timings.lap("load");

    let (initial, boundary) = match &fc.boundary {
        Some(b) => {
            let init = b.init.clone().unwrap_or_else(|| vec![0.0; k]);
            let fit = fit_boundary(map.as_ref(), &b.targets, &init, &b.options)?;
            (DynamicState { q: fit.q.clone(), qdot: fit.qdot.clone(), t: 0.0 }, Some(fit))
        }
        None => {
            let pad = |v: &[f64], what: &str| -> Result<Vec<f64>> {
                if v.len() > k {
                    bail!("initial.{what} has {} entries but the chart has {k} coordinates", v.len());
                }
                let mut out = v.to_vec();
                out.resize(k, 0.0);
                Ok(out)
            };
            (DynamicState { q: pad(&fc.initial.q, "q")?, qdot: pad(&fc.initial.qdot, "qdot")?, t: 0.0 }, None)
        }
    };
    timings.lap("boundary");
    let sim = run_simulation(map.as_ref(), &initial, &fc.potential, &fc.sim)?;
    timings.lap("simulate");

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("step,t");
    for i in 0..k {
        write!(csv, ",q{i}")?;
    }
    for i in 0..k {
        write!(csv, ",qdot{i}")?;
    }
    csv.push('\n');
    for (i, s) in sim.states.iter().enumerate() {
        write!(csv, "{i},{}", s.t)?;
        for v in s.q.iter().chain(&s.qdot) {
            write!(csv, ",{v}")?;
        }
        csv.push('\n');
    }
    io_util::write_atomic(&a.out.join("states.csv"), csv.as_bytes())?;
    io_util::write_atomic(&a.out.join("energy.csv"), sim.energy.to_csv().as_bytes())?;

    if let Some(faces) = &faces {
        let qs: Vec<Vec<f64>> = sim.states.iter().step_by(fc.export_every).map(|s| s.q.clone()).collect();
        export_motion(map.as_ref(), &qs, faces, fc.sim.dt * fc.export_every as f64)?.save(&a.out.join("motion"))?;
    }
    let t: Vec<f64> = sim.states.iter().map(|s| s.t).collect();
    let q0: Vec<f64> = sim.states.iter().map(|s| s.q[0]).collect();
    let summary = serde_json::json!({
        "steps_completed": sim.states.len() - 1,
        "relative_drift": sim.energy.relative_drift(),
        "metric_eps": sim.metric_eps,
        "period_q0": measured_period(&t, &q0),
        "boundary": boundary,
        "failure": sim.failure.as_ref().map(|e| e.to_string()),
    });
    io_util::write_json(&a.out.join("summary.json"), &summary)?;
    finish(&a.out, m, timings)?;
    if let Some(e) = sim.failure {
        return Err(anyhow::Error::new(e).context(format!("simulation stopped after {} steps", sim.states.len() - 1)));
    }
    println!("simulated {} steps, relative energy drift {:.3e}", sim.states.len() - 1, sim.energy.relative_drift());
    Ok(())
}

#[derive(Serialize)]
struct TargetReport<'a> {
    target: String,
    #[serde(flatten)]
    result: &'a IkResult,
    /// Final Chamfer-L1 below half of the input-to-target value.
    halved: bool,
}

pub fn eval_ik(a: &EvalIkArgs, workers: usize) -> Result<()> {
    let mut timings = Timings::start();
    let mut fc = match &a.config {
        Some(p) => config::load(p)?,
        None => EvalIkFileConfig::default(),
    };
    fc.ik.seed = resolve_seed(a.seed, fc.ik.seed)?;
    fc.ik.validate()?;
    let (state, model, _) = TrainState::load(&a.checkpoint)?;
    let chart = ReducedChart::load(&a.chart)?;
    let input = Mesh::load_obj(&a.input)?;
    let targets = a.target.iter().map(|p| Mesh::load_obj(p).map_err(anyhow::Error::from)).collect::<Result<Vec<_>>>()?;
    let map = NeurokMap::new(&input, &state.weights, &model, chart, fc.sample_seed)?;
    timings.lap("load");

    let workers = workers.clamp(1, targets.len());
    let mut results: Vec<Option<neurok_core::Result<IkResult>>> = (0..targets.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (map, input, targets, ik) = (&map, &input, &targets, &fc.ik);
                s.spawn(move || {
                    (w..targets.len())
                        .step_by(workers)
                        .map(|i| (i, solve_ik(map, input, &targets[i], ik)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ik worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let results = results.into_iter().map(|r| r.expect("every target solved")).collect::<neurok_core::Result<Vec<_>>>()?;
    timings.lap("solve");

    let reports: Vec<TargetReport> = a
        .target
        .iter()
        .zip(&results)
        .map(|(p, r)| TargetReport {
            target: p.display().to_string(),
            result: r,
            halved: r.best.chamfer_l1 < 0.5 * r.initial.chamfer_l1,
        })
        .collect();
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&IkResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let metrics = serde_json::json!({
        "targets": reports,
        "summary": {
            "count": results.len(),
            "halved": reports.iter().filter(|r| r.halved).count(),
            "diverged": results.iter().filter(|r| r.diverged).count(),
            "mean_initial_chamfer_l1": mean(&|r| r.initial.chamfer_l1),
            "mean_final_chamfer_l1": mean(&|r| r.best.chamfer_l1),
            "mean_final_chamfer_l2": mean(&|r| r.best.chamfer_l2),
            "mean_final_iou": mean(&|r| r.best.iou),
        },
    });
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    io_util::write_json(&a.out.join("metrics.json"), &metrics)?;

    let mut m = RunManifest::new("eval-ik", fc.ik.seed, &fc)?;
    m.input(&a.checkpoint.join("checkpoint.json"))?;
    m.input(&a.chart)?;
    m.input(&a.input)?;
    for p in &a.target {
        m.input(p)?;
    }
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    finish(&a.out, m, timings)?;
    if results.iter().all(|r| r.diverged) {
        return Err(NumericalFailure("inverse kinematics diverged from every start".into()).into());
    }
    println!("{}", serde_json::to_string_pretty(&metrics["summary"])?);
    Ok(())
}
