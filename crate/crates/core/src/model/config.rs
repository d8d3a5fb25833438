use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DeformationMode;

/// Architecture and loss hyper-parameters of the conditional VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent token count K.
    pub tokens: usize,
    /// Per-token latent width F_token.
    pub token_dim: usize,
    /// Positional feature width F_pos; also the attention width.
    pub pos_dim: usize,
    /// Fourier frequency bands B (frequencies 2^o * pi, o < B).
    pub bands: usize,
    pub n_sample: usize,
    /// Self-attention blocks after each cross-attention.
    pub blocks: usize,
    pub heads: usize,
    /// 3 for displacements, 8 for dual quaternions.
    pub d_deform: usize,
    pub k_drive: usize,
    /// KL weight.
    pub lambda: f64,
    pub recon_reduction: Reduction,
}

/// How squared reconstruction errors are reduced over field entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Squared L2 norm of the whole field error.
    #[default]
    Sum,
    Mean,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            token_dim: 16,
            pos_dim: 64,
            bands: 8,
            n_sample: 512,
            blocks: 2,
            heads: 4,
            d_deform: 8,
            k_drive: 4,
            lambda: 0.01,
            recon_reduction: Reduction::Sum,
        }
    }
}

impl ModelConfig {
    /// Latent dimension k = K * F_token.
    pub fn latent_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    pub fn fourier_dim(&self) -> usize {
        3 + 6 * self.bands
    }

    pub fn mode(&self) -> DeformationMode {
        DeformationMode::from_width(self.d_deform).unwrap_or(DeformationMode::DualQuaternion)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokens", self.tokens),
            ("token_dim", self.token_dim),
            ("pos_dim", self.pos_dim),
            ("n_sample", self.n_sample),
            ("heads", self.heads),
            ("k_drive", self.k_drive),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be at least 1")));
            }
        }
        if self.pos_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model.heads ({}) must divide model.pos_dim ({})",
                self.heads, self.pos_dim
            )));
        }
        DeformationMode::from_width(self.d_deform).map_err(|_| {
            Error::invalid(format!("model.d_deform must be 3 or 8, got {}", self.d_deform))
        })?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("model.lambda must be non-negative, got {}", self.lambda)));
        }
        if self.mode() == DeformationMode::DualQuaternion && self.n_sample < 3 {
            return Err(Error::invalid("dual-quaternion mode needs n_sample >= 3"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.latent_dim(), 128);
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.recon_reduction, Reduction::Sum);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let c = ModelConfig { heads: 3, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
        assert!(ModelConfig { d_deform: 4, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { tokens: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { lambda: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"tokens": 4, "lambda": 0.0, "recon_reduction": "mean"}"#).unwrap();
        assert_eq!((c.tokens, c.token_dim, c.lambda, c.recon_reduction), (4, 16, 0.0, Reduction::Mean));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"tokenz": 4}"#).is_err());
    }
}
