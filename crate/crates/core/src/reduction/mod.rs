//! Active-subspace compression of the latent space into a reduced chart.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{sample_surface, DeformationMode, Mesh};
use crate::io_util;
use crate::model::{apply_dualquats, encode_prior, ModelConfig, NeurokWeights, QueryDecoder};

pub const CHART_MAGIC: &str = "NEUROK-CHART-v1";

/// Affine chart `z = base + A^T q` with orthonormal rows in `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedChart {
    k: usize,
    k_q: usize,
    /// Row-major `[k_q, k]`.
    a: Vec<f64>,
    base: Vec<f64>,
    eigenvalues: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ChartHeader {
    schema_version: u32,
    k: usize,
    k_q: usize,
    eigenvalues: Vec<f64>,
}

impl ReducedChart {
    pub fn new(a: Vec<f64>, k_q: usize, base: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let k = base.len();
        if k == 0 || k_q == 0 || k_q > k || a.len() != k_q * k {
            return Err(Error::shape("chart", format!("A has {} entries for k_q = {k_q}, k = {k}", a.len())));
        }
        let chart = Self { k, k_q, a, base, eigenvalues };
        let m = chart.matrix();
        let err = (&m * m.transpose() - DMatrix::identity(k_q, k_q)).amax();
        if err > 1e-10 {
            return Err(Error::invalid(format!("chart rows are not orthonormal (max deviation {err:.2e})")));
        }
        Ok(chart)
    }

    /// Chart over the whole latent space (`A = I`).
    pub fn identity(base: Vec<f64>) -> Self {
        let k = base.len();
        let a = DMatrix::<f64>::identity(k, k).as_slice().to_vec();
        Self { k, k_q: k, a, base, eigenvalues: vec![] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_q(&self) -> usize {
        self.k_q
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Full spectrum, descending (empty for identity charts).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Row-major `[k_q, k]`.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k_q, self.k, &self.a)
    }

    /// Fraction of eigenvalue mass captured by the chart.
    pub fn captured(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.k_q.min(self.eigenvalues.len())].iter().sum::<f64>() / total
    }

    pub fn lift(&self, q: &[f64]) -> Vec<f64> {
        let mut z = self.base.clone();
        for (r, qr) in q.iter().enumerate().take(self.k_q) {
            for (zc, a) in z.iter_mut().zip(&self.a[r * self.k..(r + 1) * self.k]) {
                *zc += a * qr;
            }
        }
        z
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        (0..self.k_q)
            .map(|r| self.a[r * self.k..(r + 1) * self.k].iter().zip(z).zip(&self.base).map(|((a, z), b)| a * (z - b)).sum())
            .collect()
    }

    /// `A g`: pulls a latent-space covector back to chart coordinates.
    pub fn pullback(&self, gz: &[f64]) -> Vec<f64> {
        (0..self.k_q).map(|r| self.a[r * self.k..(r + 1) * self.k].iter().zip(gz).map(|(a, g)| a * g).sum()).collect()
    }

    /// Records `base + A^T q` for a `[k_q]` node.
    pub fn lift_graph(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let mut at_rows = vec![0.0; self.k * self.k_q];
        for r in 0..self.k_q {
            for c in 0..self.k {
                at_rows[c * self.k_q + r] = self.a[r * self.k + c];
            }
        }
        let at = g.constant(Tensor::new(vec![self.k, self.k_q], at_rows)?);
        let q2 = g.reshape(q, &[self.k_q, 1])?;
        let z = g.matmul(at, q2)?;
        let z = g.reshape(z, &[self.k])?;
        let base = g.constant(Tensor::vector(self.base.clone()));
        g.add(z, base)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ChartHeader { schema_version: 1, k: self.k, k_q: self.k_q, eigenvalues: self.eigenvalues.clone() };
        let mut out = Vec::new();
        writeln!(out, "{CHART_MAGIC}").expect("vec write");
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
        for v in self.a.iter().chain(&self.base) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("chart file: {m}"));
        let nl1 = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..nl1] != CHART_MAGIC.as_bytes() {
            return Err(bad("bad magic"));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let header: ChartHeader = serde_json::from_slice(&rest[..nl2])?;
        if header.schema_version != 1 {
            return Err(bad(&format!("unsupported schema_version {}", header.schema_version)));
        }
        let payload = &rest[nl2 + 1..];
        let n = header.k_q * header.k + header.k;
        if payload.len() != 8 * n {
            return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), 8 * n)));
        }
        let vals: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (a, base) = vals.split_at(header.k_q * header.k);
        Self::new(a.to_vec(), header.k_q, base.to_vec(), header.eigenvalues)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Monte-Carlo draws; `None` means 20 k.
    pub n_mc: Option<usize>,
    /// Eigenvalue mass to capture when `k_q` is not given.
    pub threshold: f64,
    pub k_q: Option<usize>,
    /// Upper bound on a threshold-selected `k_q`.
    pub cap: usize,
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { n_mc: None, threshold: 0.99, k_q: None, cap: 16, seed: 0 }
    }
}

impl ReductionConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!("reduction.threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if let Some(kq) = self.k_q {
            if kq == 0 || kq > k {
                return Err(Error::invalid(format!("reduction.k_q must lie in 1..={k}, got {kq}")));
            }
        }
        if self.cap == 0 {
            return Err(Error::invalid("reduction.cap must be at least 1"));
        }
        if self.n_mc == Some(0) {
            return Err(Error::invalid("reduction.n_mc must be at least 1"));
        }
        Ok(())
    }

    pub fn draws(&self, k: usize) -> usize {
        self.n_mc.unwrap_or(20 * k)
    }
}

/// Active subspace of a scalar function from its gradients at
/// `z ~ N(base, I)`.
pub fn active_subspace<F>(mut grad: F, base: &[f64], cfg: &ReductionConfig) -> Result<ReducedChart>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k = base.len();
    cfg.validate(k)?;
    let n = cfg.draws(k);
    if n < 10 * k {
        log::warn!("n_mc = {n} is below the recommended 10 k = {}", 10 * k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut c = DMatrix::<f64>::zeros(k, k);
    let mut z = vec![0.0; k];
    for _ in 0..n {
        for (zi, b) in z.iter_mut().zip(base) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zi = b + e;
        }
        let gz = grad(&z)?;
        if gz.len() != k || !gz.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("surrogate gradient is non-finite or has the wrong length".into()));
        }
        let gv = nalgebra::DVector::from_column_slice(&gz);
        c.ger(1.0 / n as f64, &gv, &gv, 1.0);
    }
    let c = (&c + c.transpose()) * 0.5;
    chart_from_covariance(c, base.to_vec(), cfg)
}

fn chart_from_covariance(c: DMatrix<f64>, base: Vec<f64>, cfg: &ReductionConfig) -> Result<ReducedChart> {
    let k = base.len();
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let eigenvalues: Vec<f64> = order
        .iter()
        .map(|i| {
            let l = eig.eigenvalues[*i];
            if l.abs() <= 1e-12 * lmax || l < 0.0 { 0.0 } else { l }
        })
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    let k_q = match cfg.k_q {
        Some(kq) => kq,
        None if total <= 0.0 => {
            log::warn!("gradient covariance is zero; keeping the full latent space");
            k
        }
        None => {
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, l) in eigenvalues.iter().enumerate() {
                acc += l;
                if acc >= cfg.threshold * total * (1.0 - 1e-12) {
                    chosen = Some(i + 1);
                    break;
                }
            }
            match chosen {
                Some(kq) if kq > cfg.cap => {
                    log::warn!("threshold {} needs k_q = {kq}; capped at {}", cfg.threshold, cfg.cap);
                    cfg.cap
                }
                Some(kq) => kq,
                None => {
                    log::warn!("threshold {} unreachable; keeping the full latent space", cfg.threshold);
                    k
                }
            }
        }
    };
    let mut a = Vec::with_capacity(k_q * k);
    for &col in order.iter().take(k_q) {
        let v = eig.eigenvectors.column(col);
        // Largest-magnitude entry positive (lowest index on ties).
        let mut piv = 0;
        for i in 1..k {
            if v[i].abs() > v[piv].abs() * (1.0 + 1e-12) {
                piv = i;
            }
        }
        let s = if v[piv] < 0.0 { -1.0 } else { 1.0 };
        a.extend(v.iter().map(|x| x * s));
    }
    ReducedChart::new(a, k_q, base, eigenvalues)
}

/// Norm of the decoded field on a fixed sample set, with gradients.
/// In dual-quaternion mode each row is first turned into the displacement
/// of its own sample.
pub struct DecoderSurrogate {
    decoder: QueryDecoder,
}

impl DecoderSurrogate {
    pub fn new(decoder: QueryDecoder) -> Self {
        Self { decoder }
    }

    fn record(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let field = self.decoder.build(g, z)?;
        let disp = match self.decoder.config().mode() {
            DeformationMode::Displacement => field,
            DeformationMode::DualQuaternion => {
                let pts = self.decoder.points();
                let moved = apply_dualquats(g, field, pts)?;
                let p = g.constant(Tensor::new(vec![pts.len(), 3], pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?);
                g.sub(moved, p)?
            }
        };
        let sq = g.square(disp)?;
        let s = g.sum(sq);
        Ok(g.sqrt(s))
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let s = self.record(&mut g, zv)?;
        Ok(g.value(s).data()[0])
    }

    pub fn value_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let zv = g.variable(Tensor::vector(z.to_vec()));
        let s = self.record(&mut g, zv)?;
        let grads = g.backward(s)?;
        let gz = grads.get(zv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()]);
        Ok((g.value(s).data()[0], gz))
    }
}

/// `||decode(z)||` on the given samples (displacement-equivalent in dual-quaternion mode).
pub fn surrogate(z: &[f64], samples: &crate::geometry::SurfaceSamples, weights: &NeurokWeights, cfg: &ModelConfig) -> Result<f64> {
    let dec = QueryDecoder::new(weights.clone(), cfg.clone(), samples.positions().to_vec())?;
    DecoderSurrogate::new(dec).value(z)
}

/// Chart for `mesh`: prior mean as base, active subspace of the decoder
/// surrogate on one fixed sample set drawn with `sample_seed`.
pub fn compute_active_subspace(
    mesh: &Mesh,
    weights: &NeurokWeights,
    cfg: &ModelConfig,
    rcfg: &ReductionConfig,
    sample_seed: u64,
) -> Result<ReducedChart> {
    let base = encode_prior(mesh, weights, cfg, sample_seed)?.mean;
    let samples = sample_surface(mesh, cfg.n_sample, sample_seed)?;
    let sur = DecoderSurrogate::new(QueryDecoder::new(weights.clone(), cfg.clone(), samples.positions().to_vec())?);
    active_subspace(|z| Ok(sur.value_grad(z)?.1), &base, rcfg)
}

/// Largest principal angle between the row spaces of two orthonormal-row matrices.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a * b.transpose();
    let s = m.singular_values();
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    // acos is ill-conditioned near 1; use the sine form instead.
    (1.0 - smin * smin).max(0.0).sqrt().asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::synthdata::box_mesh;

    #[test]
    fn lift_and_project() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let chart = ReducedChart::new(vec![s, s, 0.0, 0.0, 0.0, 1.0], 2, vec![1.0, 2.0, 3.0], vec![2.0, 1.0, 0.0]).unwrap();
        assert_eq!(chart.lift(&[0.0, 0.0]), vec![1.0, 2.0, 3.0]);
        let q = [0.3, -1.7];
        let back = chart.project(&chart.lift(&q));
        assert!((back[0] - q[0]).abs() < 1e-12 && (back[1] - q[1]).abs() < 1e-12);
        // z - base in the row space survives a round trip.
        let z = [1.0 + 0.5, 2.0 + 0.5, 3.0 - 2.0];
        let again = chart.lift(&chart.project(&z));
        for (a, b) in again.iter().zip(z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ReducedChart::new(vec![1.0, 1.0, 0.0], 1, vec![0.0; 3], vec![]).is_err());

        let mut g = Graph::new();
        let qv = g.constant(Tensor::vector(q.to_vec()));
        let zv = chart.lift_graph(&mut g, qv).unwrap();
        for (a, b) in g.value(zv).data().iter().zip(chart.lift(&q)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn chart_file_round_trip() {
        let base = vec![0.5, -0.25, 0.125];
        let chart = ReducedChart::new(vec![0.0, 1.0, 0.0], 1, base, vec![3.0, 0.5, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.chart");
        chart.save(&p).unwrap();
        assert_eq!(ReducedChart::load(&p).unwrap(), chart);
        let mut bytes = chart.to_bytes();
        bytes.pop();
        assert!(ReducedChart::from_bytes(&bytes).is_err());
    }

    #[test]
    fn recovers_single_direction() {
        let base = vec![0.0; 5];
        let cfg = ReductionConfig { n_mc: Some(200), ..Default::default() };
        // G = z_1^2, gradient 2 z_1 e_1.
        let chart = active_subspace(|z| Ok(vec![2.0 * z[0], 0.0, 0.0, 0.0, 0.0]), &base, &cfg).unwrap();
        assert_eq!(chart.k_q(), 1);
        assert!((chart.a()[0] - 1.0).abs() < 1e-12);
        let e1 = DMatrix::from_row_slice(1, 5, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(principal_angle(&chart.matrix(), &e1) < 1e-6);
        assert!(chart.eigenvalues().windows(2).all(|w| w[0] >= w[1]) && chart.eigenvalues().iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn isotropic_spectrum_is_flat() {
        let k = 20;
        let base = vec![0.0; k];
        let cfg = ReductionConfig { n_mc: Some(20_000), cap: 64, ..Default::default() };
        let chart = active_subspace(|z| Ok(z.iter().map(|v| 2.0 * v).collect()), &base, &cfg).unwrap();
        let ev = chart.eigenvalues();
        // E[4 z z^T] = 4 I; MC spread about 4 * 2 sqrt(k / n).
        assert!(ev.iter().all(|l| (l - 4.0).abs() < 0.5), "{ev:?}");
        assert!(chart.k_q() >= k - 1);
        // Captured mass grows with k_q.
        let masses: Vec<f64> = (1..=k).map(|kq| ev[..kq].iter().sum::<f64>()).collect();
        assert!(masses.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_gradient_keeps_full_space_and_explicit_kq_wins() {
        let base = vec![0.0; 3];
        let chart = active_subspace(|_| Ok(vec![0.0; 3]), &base, &ReductionConfig { n_mc: Some(30), ..Default::default() }).unwrap();
        assert_eq!(chart.k_q(), 3);
        let cfg = ReductionConfig { n_mc: Some(30), k_q: Some(2), ..Default::default() };
        assert_eq!(active_subspace(|z| Ok(z.to_vec()), &base, &cfg).unwrap().k_q(), 2);
        assert!(ReductionConfig { k_q: Some(4), ..Default::default() }.validate(3).is_err());
    }

    fn cube() -> Mesh {
        let t = box_mesh(Vec3::zeros(), Vec3::repeat(1.0), [1, 1, 1]);
        Mesh::new(t.vertices, t.faces).unwrap()
    }

    #[test]
    fn surrogate_matches_recomputation_and_scales() {
        for d_deform in [3, 8] {
            let cfg = ModelConfig { tokens: 2, token_dim: 2, pos_dim: 8, bands: 2, n_sample: 10, blocks: 1, heads: 2, d_deform, ..Default::default() };
            let mut w = NeurokWeights::init(&cfg, 1).unwrap();
            let samples = sample_surface(&cube(), 10, 3).unwrap();
            let z = vec![0.3, -0.2, 0.5, 0.1];
            let field = crate::model::decode_points(&z, samples.positions(), &w, &cfg).unwrap();
            let disp = field.displacements_at(samples.positions()).unwrap();
            let want = disp.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
            let got = surrogate(&z, &samples, &w, &cfg).unwrap();
            assert!((got - want).abs() < 1e-12 * want.max(1.0));

            if d_deform == 3 {
                // Scaling the head scales the output.
                for name in ["dec.head.w2", "dec.head.b2"] {
                    w.store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= -2.5);
                }
                let scaled = surrogate(&z, &samples, &w, &cfg).unwrap();
                assert!((scaled - 2.5 * got).abs() < 1e-12 * scaled);
                for name in ["dec.head.w2", "dec.head.b2"] {
                    w.store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                assert_eq!(surrogate(&z, &samples, &w, &cfg).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_fd() {
        let cfg = ModelConfig { tokens: 2, token_dim: 2, pos_dim: 8, bands: 2, n_sample: 10, blocks: 1, heads: 2, ..Default::default() };
        let w = NeurokWeights::init(&cfg, 5).unwrap();
        let samples = sample_surface(&cube(), 10, 3).unwrap();
        let sur = DecoderSurrogate::new(QueryDecoder::new(w, cfg, samples.positions().to_vec()).unwrap());
        let z = vec![0.3, -0.2, 0.5, 0.1];
        let (_, g) = sur.value_grad(&z).unwrap();
        for i in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (sur.value(&zp).unwrap() - sur.value(&zm).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1e-3));
        }
    }
}
