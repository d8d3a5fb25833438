//! Shared fixtures for the benchmarks.

use neurok_core::dynamics::NeurokMap;
use neurok_core::geometry::{Mesh, Vec3};
use neurok_core::model::{ModelConfig, NeurokWeights};
use neurok_core::reduction::ReducedChart;
use neurok_core::synthdata::box_mesh;
use neurok_core::Result;

/// Box mesh with `cells^3` cells spanning `[-0.5, 0.5]^3`.
pub fn cube(cells: usize) -> Result<Mesh> {
    let t = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5), [cells; 3]);
    Mesh::new(t.vertices, t.faces)
}

pub fn small_model() -> ModelConfig {
    ModelConfig { tokens: 4, token_dim: 2, pos_dim: 16, bands: 4, n_sample: 64, blocks: 1, heads: 2, d_deform: 8, ..Default::default() }
}

/// Untrained decoder on `mesh` with the full latent space as chart.
pub fn neurok_map(mesh: &Mesh, cfg: &ModelConfig) -> Result<NeurokMap> {
    let weights = NeurokWeights::init(cfg, 0)?;
    let chart = ReducedChart::identity(vec![0.0; cfg.latent_dim()]);
    NeurokMap::new(mesh, &weights, cfg, chart, 0)
}

/// Deterministic latent point with small entries.
pub fn latent_point(k: usize) -> Vec<f64> {
    (0..k).map(|i| 0.1 * ((i as f64) * 0.7).sin()).collect()
}
