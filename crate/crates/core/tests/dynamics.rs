use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neurok_core::dynamics::{
    export_motion, measured_period, simulate, DynamicState, LatentMap, LinearMap, NeurokMap, PendulumMap,
    PotentialSpec, SimConfig,
};
use neurok_core::geometry::chamfer;
use neurok_core::model::{ModelConfig, TrainState};
use neurok_core::reduction::{ReducedChart, ReductionConfig, compute_active_subspace};
use neurok_core::synthdata::{generate, ScenarioKind, ScenarioSpec};

fn orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0)).qr().q()
}

#[test]
fn rotating_the_chart_rotates_the_trajectory() {
    let b = DMatrix::from_fn(9, 3, |r, c| ((2 * r + 5 * c) as f64).cos());
    let offset = vec![0.2; 9];
    let r = orthogonal(3, 1);
    let m1 = LinearMap::new(b.clone(), offset.clone()).unwrap();
    let m2 = LinearMap::new(&b * &r, offset).unwrap();
    let spec = PotentialSpec { gravity: [0.0, 0.0, -9.81], ..Default::default() };
    let cfg = SimConfig { dt: 1e-2, steps: 200, metric_eps: Some(0.0), ..Default::default() };
    let q0 = nalgebra::DVector::from_vec(vec![0.3, -0.1, 0.5]);
    let v0 = nalgebra::DVector::from_vec(vec![1.0, 0.5, -0.2]);
    let s1 = simulate(&m1, &DynamicState { q: q0.as_slice().to_vec(), qdot: v0.as_slice().to_vec(), t: 0.0 }, &spec, &cfg).unwrap();
    let (q0r, v0r) = (r.transpose() * &q0, r.transpose() * &v0);
    let s2 = simulate(&m2, &DynamicState { q: q0r.as_slice().to_vec(), qdot: v0r.as_slice().to_vec(), t: 0.0 }, &spec, &cfg).unwrap();
    for (a, b) in s1.states.iter().zip(&s2.states) {
        let xa = m1.eval(&a.q).unwrap();
        let xb = m2.eval(&b.q).unwrap();
        assert!(xa.iter().zip(&xb).all(|(x, y)| (x - y).abs() < 1e-6));
    }
    assert!((s1.energy.relative_drift() - s2.energy.relative_drift()).abs() < 1e-6);
}

#[test]
fn large_swing_period_matches_refined_run() {
    let map = PendulumMap { length: 0.7 };
    let spec = PotentialSpec::default();
    let run = |dt: f64| {
        let cfg = SimConfig { dt, steps: (5.0 / dt) as usize, metric_eps: Some(0.0), ..Default::default() };
        let sim = simulate(&map, &DynamicState { q: vec![1.0], qdot: vec![0.0], t: 0.0 }, &spec, &cfg).unwrap();
        let t: Vec<f64> = sim.states.iter().map(|s| s.t).collect();
        let q: Vec<f64> = sim.states.iter().map(|s| s.q[0]).collect();
        measured_period(&t, &q).unwrap()
    };
    let (coarse, fine) = (run(1e-2), run(1e-4));
    assert!((coarse / fine - 1.0).abs() < 5e-3, "{coarse} vs {fine}");
    // Finite amplitude lengthens the period.
    assert!(fine > 2.0 * std::f64::consts::PI * (0.7f64 / 9.81).sqrt());
}

#[test]
fn exported_frames_match_a_reloaded_map() {
    let mut s = ScenarioSpec::new("h", ScenarioKind::Hinge, 0.2, 0.1);
    s.geometry.resolution = 2;
    let mesh = generate(&s).unwrap().mesh(0);
    let cfg = ModelConfig { tokens: 2, token_dim: 2, pos_dim: 8, bands: 2, n_sample: 16, blocks: 1, heads: 2, ..Default::default() };
    let state = TrainState::new(&cfg, 3).unwrap();
    let chart = compute_active_subspace(&mesh, &state.weights, &cfg, &ReductionConfig { k_q: Some(2), n_mc: Some(50), ..Default::default() }, 0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    state.save(&dir.path().join("model"), &cfg, &Default::default()).unwrap();
    chart.save(&dir.path().join("chart.bin")).unwrap();
    let map = NeurokMap::new(&mesh, &state.weights, &cfg, chart, 0).unwrap();

    let qs: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64, -0.05 * i as f64]).collect();
    let motion = export_motion(&map, &qs, mesh.faces(), 0.01).unwrap();
    assert_eq!(motion.len(), qs.len());

    let (loaded, lcfg, _) = TrainState::load(&dir.path().join("model")).unwrap();
    let lchart = ReducedChart::load(&dir.path().join("chart.bin")).unwrap();
    let again = NeurokMap::new(&mesh, &loaded.weights, &lcfg, lchart, 0).unwrap();
    for (i, q) in qs.iter().enumerate() {
        let x = neurok_core::geometry::unflatten(&again.eval(q).unwrap());
        let c = chamfer(motion.frame(i), &x).unwrap();
        assert_eq!((c.l1, c.l2), (0.0, 0.0));
    }

    let still = export_motion(&map, &vec![vec![0.2, 0.1]; 3], mesh.faces(), 0.01).unwrap();
    assert_eq!(still.frame(0), still.frame(2));
}
