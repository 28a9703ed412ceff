//! Hyperparameters for training, sampling and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::LangevinConfig;

/// Training configuration.
///
/// The JSON form uses the short symbol names (`K`, `d`, `L`, `T`, `m`, ...)
/// and rejects unknown keys. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Hash code length in bits.
    #[serde(rename = "K")]
    pub code_bits: usize,
    /// Latent dimension of the generator.
    #[serde(rename = "d")]
    pub latent_dim: usize,
    /// Number of classes.
    #[serde(rename = "L")]
    pub num_classes: usize,
    /// Generator noise scale; also the reconstruction scale of the VAE term.
    pub sigma: f64,
    /// Langevin step size.
    pub delta: f64,
    /// Langevin steps per cooperative sample. Signed so that a negative value
    /// in a config file is reported rather than rejected by the parser.
    #[serde(rename = "T")]
    pub langevin_steps: i64,
    /// KL weight of the variational loss.
    pub gamma: f64,
    #[serde(rename = "beta_I")]
    pub beta_inference: f64,
    #[serde(rename = "beta_H")]
    pub beta_hash: f64,
    #[serde(rename = "beta_C")]
    pub beta_class: f64,
    /// Triplet margin. `None` means `sqrt(K)`.
    #[serde(rename = "m")]
    pub margin: Option<f64>,
    /// Weight of the quantization penalty inside the triplet loss.
    pub lambda_q: f64,
    /// Weight of the squared-energy penalty on real and synthetic images.
    pub energy_reg: f64,
    pub batch_size: usize,
    pub lr_desc: f64,
    pub lr_gen: f64,
    pub iterations: usize,
    pub seed: u64,

    /// Project Langevin iterates onto [-1, 1] after every step.
    pub clamp: bool,
    /// Width of the first convolution; later blocks double it.
    pub channels: usize,
    /// Output width of the shared base network.
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    /// Scale of the fan-in weight initialization; embeddings use it as
    /// their standard deviation.
    pub init_gain: f64,
    /// Add real-real triplets next to the real-synthetic ones.
    pub real_triplets: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub train_size: usize,
    pub query_size: usize,
    pub database_size: usize,
    /// Cutoff of the training-time retrieval probe.
    pub probe_k: usize,
    pub probe_queries: usize,
    pub probe_database: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            code_bits: 16,
            latent_dim: 64,
            num_classes: 10,
            sigma: 0.3,
            delta: 0.01,
            langevin_steps: 15,
            gamma: 1.0,
            beta_inference: 1.0,
            beta_hash: 1.0,
            beta_class: 0.1,
            margin: None,
            lambda_q: 0.01,
            energy_reg: 1.0,
            batch_size: 32,
            lr_desc: 2e-4,
            lr_gen: 2e-4,
            iterations: 10_000,
            seed: 0,
            clamp: true,
            channels: 16,
            feature_dim: 256,
            head_hidden: 128,
            embed_dim: 16,
            init_gain: 1.0,
            real_triplets: false,
            eval_every: 500,
            checkpoint_every: 1000,
            train_size: 5000,
            query_size: 1000,
            database_size: 10_000,
            probe_k: 100,
            probe_queries: 200,
            probe_database: 1000,
        }
    }
}

impl TrainConfig {
    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or_else(|| (self.code_bits as f64).sqrt())
    }

    pub fn steps(&self) -> usize {
        self.langevin_steps.max(0) as usize
    }

    pub fn langevin(&self) -> LangevinConfig {
        LangevinConfig { delta: self.delta, steps: self.steps(), clamp: self.clamp }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Returns the config unchanged if every constraint holds, otherwise the
/// first violated one.
pub fn validate_config(cfg: TrainConfig) -> Result<TrainConfig> {
    fn positive(field: &'static str, label: &str, v: f64) -> Result<()> {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::config(field, format!("{label} must be > 0 (got {v})")))
        }
    }
    fn non_negative(field: &'static str, label: &str, v: f64) -> Result<()> {
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(Error::config(field, format!("{label} must be ≥ 0 (got {v})")))
        }
    }
    fn nonzero(field: &'static str, label: &str, v: usize) -> Result<()> {
        if v > 0 {
            Ok(())
        } else {
            Err(Error::config(field, format!("{label} must be > 0")))
        }
    }

    nonzero("K", "K", cfg.code_bits)?;
    nonzero("d", "d", cfg.latent_dim)?;
    if cfg.num_classes < 2 {
        return Err(Error::config("L", "L must be ≥ 2"));
    }
    positive("sigma", "sigma", cfg.sigma)?;
    positive("delta", "delta", cfg.delta)?;
    if cfg.langevin_steps < 0 {
        return Err(Error::config("T", "T must be ≥ 0"));
    }
    non_negative("gamma", "gamma", cfg.gamma)?;
    non_negative("beta_I", "beta_I", cfg.beta_inference)?;
    non_negative("beta_H", "beta_H", cfg.beta_hash)?;
    non_negative("beta_C", "beta_C", cfg.beta_class)?;
    if let Some(m) = cfg.margin {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::config("m", "margin must be > 0"));
        }
    }
    non_negative("lambda_q", "lambda_q", cfg.lambda_q)?;
    non_negative("energy_reg", "energy_reg", cfg.energy_reg)?;
    if cfg.batch_size < 2 {
        return Err(Error::config("batch_size", "batch_size must be ≥ 2"));
    }
    non_negative("lr_desc", "lr_desc", cfg.lr_desc)?;
    non_negative("lr_gen", "lr_gen", cfg.lr_gen)?;
    nonzero("channels", "channels", cfg.channels)?;
    nonzero("feature_dim", "feature_dim", cfg.feature_dim)?;
    nonzero("head_hidden", "head_hidden", cfg.head_hidden)?;
    nonzero("embed_dim", "embed_dim", cfg.embed_dim)?;
    positive("init_gain", "init_gain", cfg.init_gain)?;
    nonzero("probe_k", "probe_k", cfg.probe_k)?;
    Ok(cfg)
}
