use std::fmt::Write as _;

use super::TrainError;
use crate::model::{parse_pairs, ModelConfig, Variant};

/// Model hyperparameters plus optimizer, batching and data-split settings.
///
/// Serialized as one flat `key=value` file; model keys and trainer keys share
/// the namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_batches: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Checkpoint period in batches; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub train_ratio: f64,
    pub min_user_utterances: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 128,
            epochs: 1,
            max_batches: 0,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            checkpoint_every: 0,
            train_ratio: 0.95,
            min_user_utterances: 1,
        }
    }

    /// Desk-scale profile: toy model dims, small batches, larger step size.
    pub fn toy(variant: Variant) -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            lr: 3e-3,
            ..Self::new(ModelConfig::toy(variant))
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.clip_norm < 0.0 {
            return bad("eps must be positive and clip_norm nonnegative");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train_ratio must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        if self.model.set(key, value)? {
            return Ok(true);
        }
        let bad = |e: &dyn std::fmt::Display| TrainError::Config(format!("{key}={value}: {e}"));
        let uint = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        let float = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        match key {
            "batch_size" => self.batch_size = uint(value)?,
            "epochs" => self.epochs = uint(value)?,
            "max_batches" => self.max_batches = uint(value)?,
            "lr" => self.lr = float(value)?,
            "beta1" => self.beta1 = float(value)?,
            "beta2" => self.beta2 = float(value)?,
            "eps" => self.eps = float(value)?,
            "clip_norm" => self.clip_norm = float(value)?,
            "checkpoint_every" => self.checkpoint_every = uint(value)?,
            "train_ratio" => self.train_ratio = float(value)?,
            "min_user_utterances" => self.min_user_utterances = uint(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a config file. A `profile=toy` line starts from the toy
    /// defaults; `variant` is required. Later lines override earlier ones.
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let pairs = parse_pairs(text)?;
        let find = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let variant: Variant = find("variant")
            .ok_or_else(|| TrainError::Config("missing `variant`".into()))?
            .parse()?;
        let mut cfg = match find("profile") {
            None | Some("full") => Self::new(ModelConfig::new(variant)),
            Some("toy") => Self::toy(variant),
            Some(other) => return Err(TrainError::Config(format!("unknown profile `{other}`"))),
        };
        for (k, v) in &pairs {
            if k == "profile" {
                continue;
            }
            if !cfg.set(k, v)? {
                return Err(TrainError::Config(format!("unknown key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: model keys and trainer keys, sorted.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = self.model.to_pairs().into_iter().collect();
        pairs.extend([
            ("batch_size", self.batch_size.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("epochs", self.epochs.to_string()),
            ("eps", format!("{:?}", self.eps)),
            ("lr", format!("{:?}", self.lr)),
            ("max_batches", self.max_batches.to_string()),
            ("min_user_utterances", self.min_user_utterances.to_string()),
            ("train_ratio", format!("{:?}", self.train_ratio)),
        ]);
        pairs.sort();
        let mut s = String::new();
        for (k, v) in pairs {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        s
    }
}
