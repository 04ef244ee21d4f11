//! Encoder, prior/posterior networks and decoder for the six model variants.
//!
//! Every variant shares one parameter naming scheme ([`ParameterStore::layout`])
//! and one graph builder ([`Net`]); the variant only decides which pieces are
//! present and how the user enters.

pub mod checkpoint;
mod config;
mod network;
mod params;

#[cfg(test)]
mod tests;

use std::path::Path;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Real};

pub use config::{parse_pairs, ModelConfig, Variant};
pub use network::{
    Batch, DecodeContext, DecoderState, EncoderOutput, ForwardOutputs, GaussNodes, LatentOutputs, Net,
};
pub use params::ParameterStore;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
    #[error("user index {index} outside user table of {rows} rows")]
    UnknownUser { index: usize, rows: usize },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("latent variant needs a z sample")]
    MissingLatent,
    #[error("decoder expects a user embedding")]
    MissingUser,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Diagonal Gaussian as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_var).all(|v| v.is_finite())
    }

    /// `mu + exp(log_var / 2) * noise`.
    pub fn sample(&self, noise: &[f64]) -> Vec<f64> {
        assert_eq!(noise.len(), self.dim(), "noise length must equal z_dim");
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), n)| m + (0.5 * lv).exp() * n)
            .collect()
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = ParameterStore::initialize(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        checkpoint::load(path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        checkpoint::encode(&self.params, &self.config.to_text())
    }
}
