use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::{Real, Tensor};

/// Named trainable tensors of one model, kept in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<(), ModelError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ModelError::DuplicateParameter(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Parameter shapes required by `cfg`, in name order.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: &str, shape: Vec<usize>| out.push((name.to_owned(), shape));
        let (v, dw, du) = (cfg.vocab_size, cfg.word_embed_dim, cfg.user_embed_dim);
        let (he, hd, z) = (cfg.encoder_hidden, cfg.decoder_hidden, cfg.z_dim);
        let eo = cfg.encoder_out();

        add("embed.word", vec![v, dw]);
        for dir in ["fwd", "bwd"] {
            add(&format!("enc.{dir}.w"), vec![dw, 4 * he]);
            add(&format!("enc.{dir}.u"), vec![he, 4 * he]);
            add(&format!("enc.{dir}.b"), vec![4 * he]);
        }
        add("dec.init.w", vec![eo, hd]);
        add("dec.init.b", vec![hd]);
        add("dec.lstm.w", vec![cfg.decoder_input(), 4 * hd]);
        add("dec.lstm.u", vec![hd, 4 * hd]);
        add("dec.lstm.b", vec![4 * hd]);
        add("out.w", vec![hd, v]);
        add("out.b", vec![v]);
        if cfg.use_attention {
            add("attn.combine.w", vec![eo + hd, hd]);
            add("attn.combine.b", vec![hd]);
        }
        if cfg.uses_user_embedding() {
            add("embed.user", vec![cfg.num_users, du]);
        }
        if cfg.is_latent() {
            add("prior.w", vec![eo + du, 2 * z]);
            add("prior.b", vec![2 * z]);
            add("post.w", vec![2 * eo, 2 * z]);
            add("post.b", vec![2 * z]);
            add("bow.hidden.w", vec![z + eo + du, cfg.bow_hidden]);
            add("bow.hidden.b", vec![cfg.bow_hidden]);
            add("bow.out.w", vec![cfg.bow_hidden, v]);
            add("bow.out.b", vec![v]);
        }
        if cfg.variant == super::Variant::FactBias {
            add("fact.user", vec![cfg.num_users, cfg.fact_rank]);
            add("fact.proj", vec![cfg.fact_rank, v]);
        }
        out.sort();
        out
    }

    /// Uniform(-init_scale, init_scale) initialization of every parameter in
    /// the layout.
    pub fn initialize(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.init_scale;
        let mut store = Self::new();
        for (name, shape) in Self::layout(cfg) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-s..s))).collect();
            store.register(name, Tensor::new(shape, data))?;
        }
        Ok(store)
    }

    /// Checks that names and shapes match the layout of `cfg` exactly.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::layout(cfg);
        for (name, shape) in &expected {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.len() != expected.len() {
            let extra: Vec<_> = self
                .names()
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(ModelError::Config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}
