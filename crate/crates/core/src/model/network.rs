//! Parameter layout and graph builders for the three networks.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{DeformationMode, DualQuat, Vec3};

enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
    Zeros,
    Const(Vec<f64>),
}

fn block_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for m in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{m}"), vec![d, d], Init::Fan(1.0)));
    }
    out.push((format!("{prefix}.mlp.w1"), vec![d, 2 * d], Init::Fan(1.0)));
    out.push((format!("{prefix}.mlp.b1"), vec![2 * d], Init::Zeros));
    out.push((format!("{prefix}.mlp.w2"), vec![2 * d, d], Init::Fan(0.5)));
    out.push((format!("{prefix}.mlp.b2"), vec![d], Init::Zeros));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, fd, k, ft, dd) = (cfg.pos_dim, cfg.fourier_dim(), cfg.tokens, cfg.token_dim, cfg.d_deform);
    let mut out = Vec::new();
    // Prior encoder.
    out.push(("prior.embed.w".into(), vec![fd, d], Init::Fan(1.0)));
    out.push(("prior.embed.b".into(), vec![d], Init::Zeros));
    out.push(("prior.tokens".into(), vec![k, d], Init::Normal(1.0)));
    block_layout(&mut out, "prior.cross", d);
    for b in 0..cfg.blocks {
        block_layout(&mut out, &format!("prior.self{b}"), d);
    }
    out.push(("prior.out.w".into(), vec![d, ft], Init::Fan(1.0)));
    out.push(("prior.out.b".into(), vec![ft], Init::Zeros));
    // Posterior encoder.
    out.push(("post.embed.w".into(), vec![fd + dd, d], Init::Fan(1.0)));
    out.push(("post.embed.b".into(), vec![d], Init::Zeros));
    out.push(("post.tokens".into(), vec![2 * k, d], Init::Normal(1.0)));
    block_layout(&mut out, "post.cross", d);
    for b in 0..cfg.blocks {
        block_layout(&mut out, &format!("post.self{b}"), d);
    }
    out.push(("post.out.w".into(), vec![d, ft], Init::Fan(1.0)));
    out.push(("post.out.b".into(), vec![ft], Init::Zeros));
    // Decoder.
    out.push(("dec.lat.w".into(), vec![ft, d], Init::Fan(1.0)));
    out.push(("dec.lat.b".into(), vec![d], Init::Zeros));
    out.push(("dec.tokpos".into(), vec![k, d], Init::Normal(1.0)));
    for b in 0..cfg.blocks {
        block_layout(&mut out, &format!("dec.self{b}"), d);
    }
    out.push(("dec.qembed.w".into(), vec![fd, d], Init::Fan(1.0)));
    out.push(("dec.qembed.b".into(), vec![d], Init::Zeros));
    block_layout(&mut out, "dec.cross", d);
    out.push(("dec.head.w1".into(), vec![d, 2 * d], Init::Fan(1.0)));
    out.push(("dec.head.b1".into(), vec![2 * d], Init::Zeros));
    out.push(("dec.head.w2".into(), vec![2 * d, dd], Init::Fan(0.1)));
    let bias = match cfg.mode() {
        DeformationMode::Displacement => Init::Zeros,
        // Start at the identity transform.
        DeformationMode::DualQuaternion => Init::Const(DualQuat::identity().to_array().to_vec()),
    };
    out.push(("dec.head.b2".into(), vec![dd], bias));
    out
}

/// All trainable tensors, keyed by dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct NeurokWeights {
    pub store: ParamStore,
}

impl NeurokWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Fan(gain) => {
                    let s = gain / (shape[0] as f64).sqrt();
                    (0..n).map(|_| s * std_normal.sample(&mut rng)).collect()
                }
                Init::Normal(s) => (0..n).map(|_| s * std_normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => v,
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { store })
    }

    /// Checks that every expected tensor exists with the right shape.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg);
        for (name, shape, _) in &want {
            let t = self.store.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, config expects {shape:?}", t.shape())));
            }
        }
        if self.store.len() != want.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, config expects {}", self.store.len(), want.len())));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }
}

/// `[x, sin(2^o pi x_a), cos(2^o pi x_a)]` for every axis `a` and band `o`.
pub fn fourier_features(points: &[Vec3], bands: usize) -> Tensor {
    let width = 3 + 6 * bands;
    let mut data = Vec::with_capacity(points.len() * width);
    for p in points {
        data.extend_from_slice(&[p.x, p.y, p.z]);
        for o in 0..bands {
            let f = (1u64 << o) as f64 * std::f64::consts::PI;
            for a in 0..3 {
                data.push((f * p[a]).sin());
            }
            for a in 0..3 {
                data.push((f * p[a]).cos());
            }
        }
    }
    Tensor::new(vec![points.len(), width], data).expect("fourier feature shape")
}

/// Graph builder bound to one weight set.
pub struct Net<'a> {
    pub g: &'a mut Graph,
    w: &'a ParamStore,
    heads: usize,
    /// Weights enter the graph as constants (no weight gradients).
    frozen: bool,
    cache: HashMap<String, Var>,
}

impl<'a> Net<'a> {
    pub fn new(g: &'a mut Graph, w: &'a NeurokWeights, cfg: &ModelConfig) -> Self {
        Self { g, w: &w.store, heads: cfg.heads, frozen: false, cache: HashMap::new() }
    }

    pub fn frozen(g: &'a mut Graph, w: &'a NeurokWeights, cfg: &ModelConfig) -> Self {
        Self { frozen: true, ..Self::new(g, w, cfg) }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.get(name) {
            return Ok(*v);
        }
        let t = self.w.require(name)?.clone();
        let v = if self.frozen { self.g.constant(t) } else { self.g.param(name, t) };
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (wv, bv) = (self.p(w)?, self.p(b)?);
        let y = self.g.matmul(x, wv)?;
        self.g.add(y, bv)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))
    }

    /// Query projection of a block, from already-normalized queries.
    pub fn project_queries(&mut self, x_norm: Var, prefix: &str) -> Result<Var> {
        let wq = self.p(&format!("{prefix}.wq"))?;
        self.g.matmul(x_norm, wq)
    }

    /// Pre-norm attention residual block followed by an MLP residual.
    /// `q_proj` may carry a precomputed query projection of `x`.
    pub fn block(&mut self, x: Var, ctx: Option<Var>, prefix: &str, q_proj: Option<Var>) -> Result<Var> {
        let q = match q_proj {
            Some(q) => q,
            None => {
                let xn = self.g.layer_norm(x);
                self.project_queries(xn, prefix)?
            }
        };
        let c = match ctx {
            Some(c) => self.g.layer_norm(c),
            None => self.g.layer_norm(x),
        };
        let (wk, wv, wo) = (self.p(&format!("{prefix}.wk"))?, self.p(&format!("{prefix}.wv"))?, self.p(&format!("{prefix}.wo"))?);
        let k = self.g.matmul(c, wk)?;
        let v = self.g.matmul(c, wv)?;
        let a = self.g.attention(q, k, v, self.heads)?;
        let a = self.g.matmul(a, wo)?;
        let x = self.g.add(x, a)?;
        let xn = self.g.layer_norm(x);
        let m = self.mlp(xn, prefix)?;
        self.g.add(x, m)
    }

    /// Perceiver encoder: learnable tokens cross-attend to `feats`, then self-attend.
    fn encode(&mut self, feats: Var, prefix: &str, blocks: usize) -> Result<Var> {
        let tokens = self.p(&format!("{prefix}.tokens"))?;
        let mut x = self.block(tokens, Some(feats), &format!("{prefix}.cross"), None)?;
        for b in 0..blocks {
            x = self.block(x, None, &format!("{prefix}.self{b}"), None)?;
        }
        let xn = self.g.layer_norm(x);
        self.linear(xn, &format!("{prefix}.out.w"), &format!("{prefix}.out.b"))
    }

    /// Prior mean, flattened to `[k]`.
    pub fn prior(&mut self, fourier: Var, cfg: &ModelConfig) -> Result<Var> {
        let feats = self.linear(fourier, "prior.embed.w", "prior.embed.b")?;
        let out = self.encode(feats, "prior", cfg.blocks)?;
        self.g.reshape(out, &[cfg.latent_dim()])
    }

    /// Posterior `(mean, log_var)`, each flattened to `[k]`.
    pub fn posterior(&mut self, fourier: Var, field: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
        let input = self.g.concat_cols(&[fourier, field])?;
        let feats = self.linear(input, "post.embed.w", "post.embed.b")?;
        let out = self.encode(feats, "post", cfg.blocks)?;
        let k = cfg.tokens;
        let mu = self.g.slice_rows(out, 0, k)?;
        let lv = self.g.slice_rows(out, k, 2 * k)?;
        Ok((self.g.reshape(mu, &[cfg.latent_dim()])?, self.g.reshape(lv, &[cfg.latent_dim()])?))
    }

    /// Latent tokens after the decoder's self-attention stack.
    pub fn decoder_tokens(&mut self, z: Var, cfg: &ModelConfig) -> Result<Var> {
        let zt = self.g.reshape(z, &[cfg.tokens, cfg.token_dim])?;
        let t = self.linear(zt, "dec.lat.w", "dec.lat.b")?;
        let pos = self.p("dec.tokpos")?;
        let mut x = self.g.add(t, pos)?;
        for b in 0..cfg.blocks {
            x = self.block(x, None, &format!("dec.self{b}"), None)?;
        }
        Ok(x)
    }

    /// Query embedding and its cross-attention projection. Both depend only
    /// on query positions and weights, so inference can cache them.
    pub fn decoder_queries(&mut self, fourier: Var) -> Result<(Var, Var)> {
        let x = self.linear(fourier, "dec.qembed.w", "dec.qembed.b")?;
        let xn = self.g.layer_norm(x);
        let q = self.project_queries(xn, "dec.cross")?;
        Ok((x, q))
    }

    /// Per-query deformation `[n, d_deform]`.
    pub fn decode_with_queries(&mut self, tokens: Var, qx: Var, qproj: Var) -> Result<Var> {
        let h = self.block(qx, Some(tokens), "dec.cross", Some(qproj))?;
        let h = self.g.layer_norm(h);
        let h = self.linear(h, "dec.head.w1", "dec.head.b1")?;
        let h = self.g.gelu(h);
        self.linear(h, "dec.head.w2", "dec.head.b2")
    }

    pub fn decode(&mut self, z: Var, fourier: Var, cfg: &ModelConfig) -> Result<Var> {
        let tokens = self.decoder_tokens(z, cfg)?;
        let (qx, qp) = self.decoder_queries(fourier)?;
        self.decode_with_queries(tokens, qx, qp)
    }
}

/// Order that sorts points by position, then by their deformation row.
/// Encoders consume points in this order, which makes their output
/// independent of input order bit for bit.
pub fn canonical_order(points: &[Vec3], rows: Option<(&[f64], usize)>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        let mut o = pa.x.total_cmp(&pb.x).then(pa.y.total_cmp(&pb.y)).then(pa.z.total_cmp(&pb.z));
        if let Some((vals, w)) = rows {
            for c in 0..w {
                o = o.then(vals[a * w + c].total_cmp(&vals[b * w + c]));
            }
        }
        o
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_at_origin_and_periodicity() {
        let f = fourier_features(&[Vec3::zeros()], 3);
        for o in 0..3 {
            let base = 3 + 6 * o;
            assert!(f.data()[base..base + 3].iter().all(|v| *v == 0.0));
            assert!(f.data()[base + 3..base + 6].iter().all(|v| *v == 1.0));
        }
        // Band 0 has frequency pi, period 2.
        let p = Vec3::new(0.3, -0.7, 1.1);
        let a = fourier_features(&[p], 2);
        let b = fourier_features(&[p + Vec3::repeat(2.0)], 2);
        for c in 3..9 {
            assert!((a.data()[c] - b.data()[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn init_matches_layout_and_is_seeded() {
        let cfg = ModelConfig { pos_dim: 16, heads: 2, n_sample: 8, ..Default::default() };
        let w = NeurokWeights::init(&cfg, 1).unwrap();
        w.check(&cfg).unwrap();
        assert_eq!(w, NeurokWeights::init(&cfg, 1).unwrap());
        assert_ne!(w, NeurokWeights::init(&cfg, 2).unwrap());
        let other = ModelConfig { blocks: 1, ..cfg };
        assert!(w.check(&other).is_err());
        // 3K learnable tokens in total.
        let tokens = w.store.require("prior.tokens").unwrap().shape()[0] + w.store.require("post.tokens").unwrap().shape()[0];
        assert_eq!(tokens, 3 * cfg.tokens);
    }

    #[test]
    fn canonical_order_sorts_lexicographically() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 1.0, 5.0), Vec3::new(0.0, 1.0, 5.0)];
        let vals = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.1, 0.0, 0.0];
        assert_eq!(canonical_order(&pts, Some((&vals, 3))), vec![3, 2, 1, 0]);
        assert_eq!(canonical_order(&pts, None), vec![2, 3, 1, 0]);
    }
}
