//! Properties of a trained toy model.

use neurok_core::geometry::{sample_surface, transfer_deformation, Trajectory, Vec3};
use neurok_core::model::{
    encode_posterior, encode_prior, evaluate_pairs, evaluation_pairs, kl_divergence, train, ModelConfig, TrainConfig,
};
use neurok_core::synthdata::{generate, ScenarioKind, ScenarioSpec};

fn hinge() -> Trajectory {
    let mut s = ScenarioSpec::new("hinge", ScenarioKind::Hinge, 2.0, 0.1);
    s.physics.angular_velocity = 0.9;
    s.geometry.resolution = 3;
    generate(&s).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig { tokens: 4, token_dim: 2, pos_dim: 16, bands: 4, n_sample: 64, blocks: 1, heads: 2, d_deform: 8, ..Default::default() }
}

fn mean_recon(curve: &[neurok_core::model::LossRecord]) -> f64 {
    curve.iter().map(|r| r.recon).sum::<f64>() / curve.len() as f64
}

#[test]
fn toy_run_learns_an_informative_model() {
    let data = vec![hinge()];
    let cfg = small();
    let tcfg = TrainConfig { steps: 2000, seed: 4, ..Default::default() };
    let out = train(&data, &cfg, &tcfg, None).unwrap();
    assert!(!out.diverged);

    let first = mean_recon(&out.curve[..100]);
    let last = mean_recon(&out.curve[out.curve.len() - 100..]);
    assert!(last < 0.25 * first, "reconstruction went {first} -> {last}");

    let w = &out.state.weights;
    let (held_in, _) = evaluation_pairs(&data, &tcfg, 32);
    let e = evaluate_pairs(w, &cfg, &data, &held_in, 0).unwrap();
    assert!(e.ratio() < 0.1, "held-in MSE / variance = {}", e.ratio());

    // Prior does not collapse to one latent for every mesh.
    let mesh = data[0].mesh(0);
    let far = mesh.with_vertices(mesh.vertices().iter().map(|p| p + Vec3::new(3.0, 0.0, 0.0)).collect()).unwrap();
    let a = encode_prior(&mesh, w, &cfg, 0).unwrap().mean;
    let b = encode_prior(&far, w, &cfg, 0).unwrap().mean;
    assert_ne!(a, b);

    // An unchanged pose sits closer to the prior than a typical pair.
    let kl_of = |fa: usize, fb: usize| {
        let m = data[0].mesh(fa);
        let s = sample_surface(&m, cfg.n_sample, 5).unwrap();
        let field = transfer_deformation(&s, m.faces(), data[0].frame(fa), data[0].frame(fb), cfg.mode()).unwrap();
        let q = encode_posterior(&field, &s, w, &cfg).unwrap();
        let p = encode_prior(&m, w, &cfg, 5).unwrap();
        kl_divergence(&q, &p).unwrap()
    };
    let mut batch: Vec<f64> = held_in.iter().map(|&(_, a, b)| kl_of(a, b)).collect();
    batch.sort_by(f64::total_cmp);
    let median = batch[batch.len() / 2];
    let zero = kl_of(4, 4);
    assert!(zero < median, "KL of the zero field {zero} vs batch median {median}");
}

#[test]
fn kl_weight_trades_reconstruction() {
    let data = vec![hinge()];
    let run = |lambda: f64| {
        let cfg = ModelConfig { lambda, ..small() };
        let out = train(&data, &cfg, &TrainConfig { steps: 1000, seed: 2, ..Default::default() }, None).unwrap();
        mean_recon(&out.curve[out.curve.len() - 200..])
    };
    let (free, weighted) = (run(0.0), run(0.01));
    assert!(free < weighted, "lambda 0: {free}, lambda 0.01: {weighted}");
}
