//! Maps from chart coordinates to flattened vertex positions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{jacobian_of, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{flatten, sample_surface, DriveStencil, Mesh, Vec3};
use crate::model::{drive_graph, ModelConfig, NeurokWeights, QueryDecoder};
use crate::reduction::ReducedChart;

/// `F: R^{k_q} -> R^{3n}` with derivatives.
pub trait LatentMap {
    fn dim(&self) -> usize;

    /// `3n`.
    fn output_dim(&self) -> usize;

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>>;

    /// `F(q)` and the `[3n, k_q]` Jacobian.
    fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;

    /// `J(q)^T w`.
    fn vjp(&self, q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let (_, j) = self.jacobian(q)?;
        Ok((j.transpose() * nalgebra::DVector::from_column_slice(w)).as_slice().to_vec())
    }

    /// Latent vector behind `q` (identity for maps without a chart).
    fn latent(&self, q: &[f64]) -> Vec<f64> {
        q.to_vec()
    }

    /// Pulls a latent-space gradient back to chart coordinates.
    fn latent_pullback(&self, gz: &[f64]) -> Vec<f64> {
        gz.to_vec()
    }

    fn n_vertices(&self) -> usize {
        self.output_dim() / 3
    }
}

/// Maps whose forward pass is recorded on an autodiff graph.
pub trait GraphMap {
    fn input_dim(&self) -> usize;
    fn output_len(&self) -> usize;
    /// Records `F(q)` as a `[3n]` node.
    fn record(&self, g: &mut Graph, q: Var) -> Result<Var>;
}

fn check_len(q: &[f64], k: usize) -> Result<()> {
    if q.len() != k {
        return Err(Error::shape("latent map", format!("expected {k} coordinates, got {}", q.len())));
    }
    Ok(())
}

pub(crate) fn graph_eval<M: GraphMap + ?Sized>(m: &M, q: &[f64]) -> Result<Vec<f64>> {
    check_len(q, m.input_dim())?;
    let mut g = Graph::new();
    let qv = g.constant(Tensor::vector(q.to_vec()));
    let out = m.record(&mut g, qv)?;
    Ok(g.value(out).data().to_vec())
}

pub(crate) fn graph_jacobian<M: GraphMap + ?Sized>(m: &M, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_len(q, m.input_dim())?;
    let mut g = Graph::new();
    let qv = g.variable(Tensor::vector(q.to_vec()));
    let out = m.record(&mut g, qv)?;
    let j = jacobian_of(&g, qv, out)?;
    let (rows, cols) = j.dims2();
    Ok((g.value(out).data().to_vec(), DMatrix::from_row_slice(rows, cols, j.data())))
}

pub(crate) fn graph_vjp<M: GraphMap + ?Sized>(m: &M, q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    check_len(q, m.input_dim())?;
    let mut g = Graph::new();
    let qv = g.variable(Tensor::vector(q.to_vec()));
    let out = m.record(&mut g, qv)?;
    let grads = g.vjp(out, &Tensor::vector(w.to_vec()))?;
    Ok(grads.get(qv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; q.len()]))
}

/// `F(q) = B q + c`.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub b: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl LinearMap {
    pub fn new(b: DMatrix<f64>, offset: Vec<f64>) -> Result<Self> {
        if b.nrows() != offset.len() || b.nrows() % 3 != 0 {
            return Err(Error::shape("linear map", "offset must match B's rows, a multiple of 3"));
        }
        Ok(Self { b, offset })
    }
}

impl LatentMap for LinearMap {
    fn dim(&self) -> usize {
        self.b.ncols()
    }

    fn output_dim(&self) -> usize {
        self.b.nrows()
    }

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len(q, self.dim())?;
        let y = &self.b * nalgebra::DVector::from_column_slice(q);
        Ok(y.iter().zip(&self.offset).map(|(a, b)| a + b).collect())
    }

    fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((self.eval(q)?, self.b.clone()))
    }
}

/// Point mass on a rod of length `L` pivoting about the origin in the
/// xz plane: `F(theta) = L (sin theta, 0, -cos theta)`.
#[derive(Clone, Copy, Debug)]
pub struct PendulumMap {
    pub length: f64,
}

impl LatentMap for PendulumMap {
    fn dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        check_len(q, 1)?;
        let (s, c) = q[0].sin_cos();
        Ok(vec![self.length * s, 0.0, -self.length * c])
    }

    fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let x = self.eval(q)?;
        let (s, c) = q[0].sin_cos();
        Ok((x, DMatrix::from_column_slice(3, 1, &[self.length * c, 0.0, self.length * s])))
    }
}

/// Two-layer GELU network, a smooth nonlinear test map.
#[derive(Clone, Debug)]
pub struct MlpMap {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl MlpMap {
    pub fn random(k: usize, hidden: usize, n_vertices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize, s: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| s * rng.random_range(-1.0..1.0)).collect()).expect("mlp shape")
        };
        let w1 = draw(k, hidden, 1.5 / (k as f64).sqrt());
        let b1 = draw(1, hidden, 0.5);
        let w2 = draw(hidden, 3 * n_vertices, 1.0 / (hidden as f64).sqrt());
        let b2 = draw(1, 3 * n_vertices, 1.0);
        Self { w1, b1, w2, b2 }
    }
}

impl GraphMap for MlpMap {
    fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    fn output_len(&self) -> usize {
        self.w2.shape()[1]
    }

    fn record(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let k = self.input_dim();
        let x = g.reshape(q, &[1, k])?;
        let (w1, b1, w2, b2) = (g.constant(self.w1.clone()), g.constant(self.b1.clone()), g.constant(self.w2.clone()), g.constant(self.b2.clone()));
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        let y = g.add(y, b2)?;
        g.reshape(y, &[self.output_len()])
    }
}

impl LatentMap for MlpMap {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.output_len()
    }

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        graph_eval(self, q)
    }

    fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        graph_jacobian(self, q)
    }

    fn vjp(&self, q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        graph_vjp(self, q, w)
    }
}

/// Learned map: chart coordinates to latent, decode on a fixed sample
/// set, drive the mesh vertices. Anchored so that `F(0)` is the rest mesh.
#[derive(Clone, Debug)]
pub struct NeurokMap {
    decoder: QueryDecoder,
    chart: ReducedChart,
    stencil: DriveStencil,
    rest: Vec<Vec3>,
    offset: Vec<f64>,
}

impl NeurokMap {
    pub fn new(mesh: &Mesh, weights: &NeurokWeights, cfg: &ModelConfig, chart: ReducedChart, sample_seed: u64) -> Result<Self> {
        if chart.k() != cfg.latent_dim() {
            return Err(Error::invalid(format!("chart has k = {}, model latent dimension is {}", chart.k(), cfg.latent_dim())));
        }
        let samples = sample_surface(mesh, cfg.n_sample, sample_seed)?;
        let decoder = QueryDecoder::new(weights.clone(), cfg.clone(), samples.positions().to_vec())?;
        let stencil = DriveStencil::new(mesh.vertices(), samples.positions(), cfg.k_drive)?;
        let mut map = Self { decoder, chart, stencil, rest: mesh.vertices().to_vec(), offset: vec![0.0; 3 * mesh.n_vertices()] };
        let at_base = map.eval(&vec![0.0; map.chart.k_q()])?;
        map.offset = flatten(&map.rest).iter().zip(&at_base).map(|(r, b)| r - b).collect();
        Ok(map)
    }

    pub fn chart(&self) -> &ReducedChart {
        &self.chart
    }

    pub fn rest(&self) -> &[Vec3] {
        &self.rest
    }
}

impl GraphMap for NeurokMap {
    fn input_dim(&self) -> usize {
        self.chart.k_q()
    }

    fn output_len(&self) -> usize {
        3 * self.rest.len()
    }

    fn record(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let z = self.chart.lift_graph(g, q)?;
        let field = self.decoder.build(g, z)?;
        let pos = drive_graph(g, field, &self.stencil, &self.rest, self.decoder.config().mode())?;
        let flat = g.reshape(pos, &[self.output_len()])?;
        let off = g.constant(Tensor::vector(self.offset.clone()));
        g.add(flat, off)
    }
}

impl LatentMap for NeurokMap {
    fn dim(&self) -> usize {
        self.chart.k_q()
    }

    fn output_dim(&self) -> usize {
        3 * self.rest.len()
    }

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        graph_eval(self, q)
    }

    fn jacobian(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        graph_jacobian(self, q)
    }

    fn vjp(&self, q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        graph_vjp(self, q, w)
    }

    fn latent(&self, q: &[f64]) -> Vec<f64> {
        self.chart.lift(q)
    }

    fn latent_pullback(&self, gz: &[f64]) -> Vec<f64> {
        self.chart.pullback(gz)
    }
}
