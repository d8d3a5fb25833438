//! Conditional VAE over deformation fields: prior encoder, posterior
//! encoder, decoder, loss and training.

mod config;
mod network;
mod skinning;
mod train;

pub use config::{ModelConfig, Reduction};
pub use network::{canonical_order, fourier_features, Net, NeurokWeights};
pub use skinning::{apply_dualquats, drive_graph};
pub use train::{
    batch_graph, evaluate_pairs, evaluation_pairs, frame_pairs, train, Adam, LossRecord, PairEval, TrainConfig, TrainOutcome, TrainState,
};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{sample_surface, DeformationField, Mesh, SurfaceSamples, Vec3};

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    /// Unit-variance prior centred at `mean`.
    pub fn prior(mean: Vec<f64>) -> Self {
        let log_var = vec![0.0; mean.len()];
        Self { mean, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_prior(&self) -> bool {
        self.log_var.iter().all(|v| *v == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.log_var.len() {
            return Err(Error::shape("gaussian", format!("mean has {} entries, log_var {}", self.mean.len(), self.log_var.len())));
        }
        if !self.mean.iter().chain(&self.log_var).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian parameters".into()));
        }
        Ok(())
    }

    /// `mean + exp(log_var / 2) * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.log_var).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
    }
}

/// KL(q || p) for a unit-variance `p`.
pub fn kl_divergence(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_divergence", format!("dimensions {} and {}", q.dim(), p.dim())));
    }
    if !p.is_prior() {
        return Err(Error::invalid("kl_divergence expects a unit-variance prior"));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(&p.mean)
        .map(|((mq, lv), mp)| 0.5 * (lv.exp() + (mq - mp).powi(2) - 1.0 - lv))
        .sum())
}

/// Reduced squared field error plus `lambda * KL(q || p)`.
pub fn loss(
    target: &DeformationField,
    pred: &DeformationField,
    q: &GaussianParams,
    p: &GaussianParams,
    lambda: f64,
    reduction: Reduction,
) -> Result<f64> {
    if target.mode() != pred.mode() || target.len() != pred.len() {
        return Err(Error::shape("loss", format!("target {} x {:?}, prediction {} x {:?}", target.len(), target.mode(), pred.len(), pred.mode())));
    }
    let se: f64 = target.values().iter().zip(pred.values()).map(|(x, y)| (x - y).powi(2)).sum();
    let recon = match reduction {
        Reduction::Sum => se,
        Reduction::Mean => se / target.values().len().max(1) as f64,
    };
    Ok(recon + lambda * kl_divergence(q, p)?)
}

/// Flattened `K x F_token` latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    z: Vec<f64>,
}

impl LatentState {
    pub fn new(z: Vec<f64>, cfg: &ModelConfig) -> Result<Self> {
        if z.len() != cfg.latent_dim() {
            return Err(Error::shape("latent", format!("expected {} entries, got {}", cfg.latent_dim(), z.len())));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite latent state".into()));
        }
        Ok(Self { z })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.z
    }

    pub fn tokens(&self, cfg: &ModelConfig) -> Vec<&[f64]> {
        self.z.chunks(cfg.token_dim).collect()
    }
}

/// Prior-encoder position embedding: Fourier features then a learned linear map.
pub fn embed_positions(points: &[Vec3], weights: &NeurokWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(fourier_features(points, cfg.bands));
    let mut net = Net::frozen(&mut g, weights, cfg);
    let e = net.linear(f, "prior.embed.w", "prior.embed.b")?;
    Ok(g.value(e).clone())
}

/// Prior over latents for a mesh, from `n_sample` surface points drawn with `seed`.
pub fn encode_prior(mesh: &Mesh, weights: &NeurokWeights, cfg: &ModelConfig, seed: u64) -> Result<GaussianParams> {
    let samples = sample_surface(mesh, cfg.n_sample, seed)?;
    encode_prior_points(samples.positions(), weights, cfg)
}

pub fn encode_prior_points(points: &[Vec3], weights: &NeurokWeights, cfg: &ModelConfig) -> Result<GaussianParams> {
    let order = canonical_order(points, None);
    let sorted: Vec<Vec3> = order.iter().map(|i| points[*i]).collect();
    let mut g = Graph::new();
    let f = g.constant(fourier_features(&sorted, cfg.bands));
    let mut net = Net::frozen(&mut g, weights, cfg);
    let mu = net.prior(f, cfg)?;
    Ok(GaussianParams::prior(g.value(mu).data().to_vec()))
}

/// Posterior over latents given a deformation field on `samples`.
pub fn encode_posterior(
    field: &DeformationField,
    samples: &SurfaceSamples,
    weights: &NeurokWeights,
    cfg: &ModelConfig,
) -> Result<GaussianParams> {
    if field.mode().width() != cfg.d_deform {
        return Err(Error::invalid(format!(
            "deformation field has width {}, model expects d_deform = {}",
            field.mode().width(),
            cfg.d_deform
        )));
    }
    if field.len() != samples.len() {
        return Err(Error::shape("encode_posterior", format!("{} field rows for {} samples", field.len(), samples.len())));
    }
    let (points, values) = sorted_inputs(samples.positions(), field.values(), cfg.d_deform);
    let mut g = Graph::new();
    let f = g.constant(fourier_features(&points, cfg.bands));
    let d = g.constant(Tensor::new(vec![points.len(), cfg.d_deform], values)?);
    let mut net = Net::frozen(&mut g, weights, cfg);
    let (mu, lv) = net.posterior(f, d, cfg)?;
    let q = GaussianParams { mean: g.value(mu).data().to_vec(), log_var: g.value(lv).data().to_vec() };
    q.validate()?;
    Ok(q)
}

pub(crate) fn sorted_inputs(points: &[Vec3], values: &[f64], width: usize) -> (Vec<Vec3>, Vec<f64>) {
    let order = canonical_order(points, Some((values, width)));
    let pts = order.iter().map(|i| points[*i]).collect();
    let vals = order.iter().flat_map(|i| values[i * width..(i + 1) * width].iter().copied()).collect();
    (pts, vals)
}

pub fn decode(z: &LatentState, query: &SurfaceSamples, weights: &NeurokWeights, cfg: &ModelConfig) -> Result<DeformationField> {
    decode_points(z.as_slice(), query.positions(), weights, cfg)
}

/// Deformation predicted at arbitrary query points.
pub fn decode_points(z: &[f64], points: &[Vec3], weights: &NeurokWeights, cfg: &ModelConfig) -> Result<DeformationField> {
    let mut g = Graph::new();
    let zv = g.constant(Tensor::vector(z.to_vec()));
    let f = g.constant(fourier_features(points, cfg.bands));
    let mut net = Net::frozen(&mut g, weights, cfg);
    let out = net.decode(zv, f, cfg)?;
    DeformationField::new(cfg.mode(), g.value(out).data().to_vec())
}

/// Decoder bound to a fixed query set, with the query-side embedding and
/// projection precomputed. Cheap to evaluate repeatedly inside larger graphs.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    weights: NeurokWeights,
    cfg: ModelConfig,
    points: Vec<Vec3>,
    qx: Tensor,
    qproj: Tensor,
}

impl QueryDecoder {
    pub fn new(weights: NeurokWeights, cfg: ModelConfig, points: Vec<Vec3>) -> Result<Self> {
        cfg.validate()?;
        weights.check(&cfg)?;
        let mut g = Graph::new();
        let f = g.constant(fourier_features(&points, cfg.bands));
        let mut net = Net::frozen(&mut g, &weights, &cfg);
        let (qx, qp) = net.decoder_queries(f)?;
        let (qx, qproj) = (g.value(qx).clone(), g.value(qp).clone());
        Ok(Self { weights, cfg, points, qx, qproj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &NeurokWeights {
        &self.weights
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Records the field `[n_query, d_deform]` for latent `z` (a `[k]` node).
    pub fn build(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let qx = g.constant(self.qx.clone());
        let qp = g.constant(self.qproj.clone());
        let mut net = Net::frozen(g, &self.weights, &self.cfg);
        let tokens = net.decoder_tokens(z, &self.cfg)?;
        net.decode_with_queries(tokens, qx, qp)
    }

    pub fn decode(&self, z: &[f64]) -> Result<DeformationField> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let out = self.build(&mut g, zv)?;
        DeformationField::new(self.cfg.mode(), g.value(out).data().to_vec())
    }
}

/// Variance of a field's entries about their per-channel means.
pub fn field_variance(values: &[f64], width: usize) -> f64 {
    let n = values.len() / width;
    if n == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; width];
    for row in values.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    values.chunks(width).flat_map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2))).sum::<f64>() / values.len() as f64
}
