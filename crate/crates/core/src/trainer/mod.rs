//! Adam training loop with length-grouped batches, gradient clipping,
//! periodic checkpoints and resumable state.
//!
//! Every random draw is a function of the run seed plus a position (epoch,
//! global batch index), so a run resumed from a checkpoint replays the same
//! batches and noise as an uninterrupted one.

mod config;


use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::derive_seed;
use crate::corpus::{EncodedTriple, UserTable, Vocabulary};
use crate::model::{checkpoint, Batch, Model, ModelError, ParameterStore};
use crate::objective::{anneal_weight, total_loss, LossBreakdown, ObjectiveError};

pub use config::TrainConfig;

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const USERS_FILE: &str = "users.txt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("diverged at batch {batch}: {source}")]
    Diverged {
        batch: usize,
        #[source]
        source: ObjectiveError,
        last_good: Option<PathBuf>,
    },
    #[error("no training examples")]
    NoData,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Bias-corrected Adam with per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.second.get(name).map(Vec::as_slice)
    }

    /// One update. Parameters without a gradient get a zero gradient, so
    /// their moments still decay.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<(), TrainError> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self.first.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.second.entry(name.to_owned()).or_insert_with(|| vec![T::zero(); n]);
            let g = grads.get(name).map(Tensor::data);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i].f64());
                let mi = self.beta1 * m[i].f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i].f64() + (1.0 - self.beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *theta = T::of(theta.f64() - update);
            }
        }
        Ok(())
    }

    /// Moments as a checkpoint body (`m.<name>`, `v.<name>`) with the step
    /// count in the text block.
    pub fn to_bytes(&self, params: &ParameterStore<T>) -> Result<Vec<u8>, TrainError> {
        let mut store = ParameterStore::new();
        for (name, p) in params.iter() {
            let zeros = || vec![T::zero(); p.len()];
            let m = self.first.get(name).cloned().unwrap_or_else(zeros);
            let v = self.second.get(name).cloned().unwrap_or_else(zeros);
            store.register(format!("m.{name}"), Tensor::new(p.shape().to_vec(), m))?;
            store.register(format!("v.{name}"), Tensor::new(p.shape().to_vec(), v))?;
        }
        Ok(checkpoint::encode(&store, &format!("step={}\n", self.step))?)
    }

    pub fn load_state(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        let (store, text) = checkpoint::decode::<T>(bytes)?;
        let step = text
            .trim()
            .strip_prefix("step=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Config(format!("optimizer state has bad header `{}`", text.trim())))?;
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (name, t) in store.iter() {
            match name.split_once('.') {
                Some(("m", rest)) => self.first.insert(rest.to_owned(), t.data().to_vec()),
                Some(("v", rest)) => self.second.insert(rest.to_owned(), t.data().to_vec()),
                _ => return Err(TrainError::Config(format!("unexpected optimizer tensor `{name}`"))),
            };
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::of(v.f64() * s));
        }
    }
    norm
}

/// Batches for one epoch: a seeded shuffle, then a stable sort by reply
/// length so batches hold similar lengths, then a seeded shuffle of batch order.
pub fn epoch_batches(data: &[EncodedTriple], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch as u64));
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| data[i].reply.len());
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

/// Standard-normal noise for the latent sample of global batch `index`.
pub fn batch_noise<T: Real>(seed: u64, index: usize, len: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, index as u64));
    (0..len)
        .map(|_| T::of(StandardNormal.sample(&mut rng)))
        .collect()
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub seed: u64,
    pub history: Vec<LossBreakdown>,
    data: &'d [EncodedTriple],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Option<PathBuf>,
    pub batches: usize,
    pub final_loss: Option<LossBreakdown>,
}

impl<'d> Trainer<'d> {
    /// Fresh model initialized from `seed`.
    pub fn new(cfg: TrainConfig, data: &'d [EncodedTriple], seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), seed)?;
        Self::with_model(cfg, model, data, seed)
    }

    pub fn with_model(cfg: TrainConfig, model: Model<f32>, data: &'d [EncodedTriple], seed: u64) -> Result<Self, TrainError> {
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self {
            cfg,
            model,
            adam,
            seed,
            history: Vec::new(),
            data,
        })
    }

    /// Continues a run from `dir` (model, optimizer state and loss history).
    pub fn resume(cfg: TrainConfig, dir: &Path, data: &'d [EncodedTriple], seed: u64) -> Result<Self, TrainError> {
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let mut t = Self::with_model(cfg, model, data, seed)?;
        t.adam.load_state(&fs::read(dir.join(OPTIMIZER_FILE))?)?;
        t.history = read_loss_csv(&fs::read_to_string(dir.join(LOSS_FILE))?)?;
        if t.history.len() as u64 != t.adam.step {
            return Err(TrainError::Config(format!(
                "loss history has {} rows but optimizer took {} steps",
                t.history.len(),
                t.adam.step
            )));
        }
        Ok(t)
    }

    pub fn batches_done(&self) -> usize {
        self.history.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Total batches the configured run takes.
    pub fn planned_batches(&self) -> usize {
        let full = self.cfg.epochs * self.batches_per_epoch();
        match self.cfg.max_batches {
            0 => full,
            cap => full.min(cap),
        }
    }

    /// Loss of the given batch at global position `index` without updating.
    pub fn evaluate_batch(&self, rows: &[usize], index: usize) -> Result<LossBreakdown, TrainError> {
        let batch = Batch::from_triples(rows.iter().map(|&i| &self.data[i]));
        let noise = self.noise_for(batch.len(), index);
        let mut net = self.model.net(false);
        let anneal = anneal_weight(index, self.cfg.model.anneal_batches);
        Ok(total_loss(&mut net, &batch, noise.as_deref(), anneal)?.1)
    }

    fn noise_for(&self, rows: usize, index: usize) -> Option<Vec<f32>> {
        self.model
            .config
            .is_latent()
            .then(|| batch_noise(self.seed, index, rows * self.model.config.z_dim))
    }

    /// Forward, backward, clip and Adam update on one batch.
    pub fn train_step(&mut self, rows: &[usize]) -> Result<LossBreakdown, TrainError> {
        let index = self.batches_done();
        let batch = Batch::from_triples(rows.iter().map(|&i| &self.data[i]));
        let noise = self.noise_for(batch.len(), index);
        let anneal = anneal_weight(index, self.cfg.model.anneal_batches);
        let mut grads = {
            let mut net = self.model.net(true);
            let (nodes, breakdown) = total_loss(&mut net, &batch, noise.as_deref(), anneal).map_err(|e| match e {
                ObjectiveError::NonFinite { .. } => TrainError::Diverged {
                    batch: index,
                    source: e,
                    last_good: None,
                },
                other => other.into(),
            })?;
            let grads = net.graph.backward(nodes.total).map_err(ObjectiveError::from)?.into_map();
            self.history.push(breakdown);
            grads
        };
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        if let Err(e) = self.adam.step(&mut self.model.params, &grads) {
            self.history.pop();
            return Err(e);
        }
        Ok(*self.history.last().expect("just pushed"))
    }

    /// Runs the remaining batches of the plan. With `out` set, writes model,
    /// optimizer state and loss history every `checkpoint_every` batches and
    /// at the end; on divergence the previous checkpoint is left in place.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
        let planned = self.planned_batches();
        let per_epoch = self.batches_per_epoch();
        let mut last_good = None;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        while self.batches_done() < planned {
            let done = self.batches_done();
            let (epoch, pos) = (done / per_epoch, done % per_epoch);
            let batches = epoch_batches(self.data, self.cfg.batch_size, self.seed, epoch);
            for rows in &batches[pos..] {
                if self.batches_done() >= planned {
                    break;
                }
                if let Err(e) = self.train_step(rows) {
                    return Err(match e {
                        TrainError::Diverged { batch, source, .. } => TrainError::Diverged {
                            batch,
                            source,
                            last_good,
                        },
                        other => other,
                    });
                }
                let n = self.batches_done();
                if let Some(dir) = out {
                    if self.cfg.checkpoint_every > 0 && n.is_multiple_of(self.cfg.checkpoint_every) && n < planned {
                        self.save(dir)?;
                        last_good = Some(dir.join(MODEL_FILE));
                    }
                }
            }
        }
        let checkpoint = match out {
            Some(dir) => {
                self.save(dir)?;
                Some(dir.join(MODEL_FILE))
            }
            None => None,
        };
        Ok(TrainOutcome {
            checkpoint,
            batches: self.batches_done(),
            final_loss: self.history.last().copied(),
        })
    }

    /// Writes model, optimizer state and loss CSV into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        self.model.save(&dir.join(MODEL_FILE))?;
        fs::write(dir.join(OPTIMIZER_FILE), self.adam.to_bytes(&self.model.params)?)?;
        fs::write(dir.join(LOSS_FILE), loss_csv(&self.history))?;
        Ok(())
    }

    /// Mean of each term over consecutive windows of `batches_per_epoch`.
    pub fn epoch_means(&self) -> Vec<LossBreakdown> {
        epoch_means(&self.history, self.batches_per_epoch())
    }
}

pub fn epoch_means(history: &[LossBreakdown], per_epoch: usize) -> Vec<LossBreakdown> {
    history
        .chunks(per_epoch.max(1))
        .map(|c| {
            let n = c.len() as f64;
            let mean = |f: fn(&LossBreakdown) -> f64| c.iter().map(f).sum::<f64>() / n;
            LossBreakdown {
                reconstruction: mean(|b| b.reconstruction),
                kl_user: mean(|b| b.kl_user),
                kl_unk: mean(|b| b.kl_unk),
                bow: mean(|b| b.bow),
                r1: mean(|b| b.r1),
                r2: mean(|b| b.r2),
                anneal_weight: mean(|b| b.anneal_weight),
                total: mean(|b| b.total),
            }
        })
        .collect()
}

pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(LossBreakdown::CSV_HEADER);
    out.push('\n');
    for (i, b) in history.iter().enumerate() {
        writeln!(out, "{}", b.csv_row(i)).expect("writing to a String");
    }
    out
}

pub fn read_loss_csv(text: &str) -> Result<Vec<LossBreakdown>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(LossBreakdown::CSV_HEADER) {
        return Err(TrainError::Config("loss history has an unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || TrainError::Config(format!("loss history row {}: `{line}`", i + 1));
            let v: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad())?;
            if v.len() != 8 {
                return Err(bad());
            }
            Ok(LossBreakdown {
                reconstruction: v[0],
                kl_user: v[1],
                kl_unk: v[2],
                bow: v[3],
                r1: v[4],
                r2: v[5],
                anneal_weight: v[6],
                total: v[7],
            })
        })
        .collect()
}

/// Writes one entry per line.
pub fn write_lines(path: &Path, lines: &[String]) -> std::io::Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s)
}

/// Vocabulary and user table stored next to a checkpoint.
pub fn save_tables(dir: &Path, vocab: &Vocabulary, users: &UserTable) -> std::io::Result<()> {
    write_lines(&dir.join(VOCAB_FILE), &vocab.tokens()[crate::corpus::RESERVED.len()..])?;
    write_lines(&dir.join(USERS_FILE), users.real_users())
}

pub fn load_tables(dir: &Path) -> std::io::Result<(Vocabulary, UserTable)> {
    let read = |name: &str| -> std::io::Result<Vec<String>> {
        Ok(fs::read_to_string(dir.join(name))?.lines().map(str::to_owned).collect())
    };
    Ok((Vocabulary::from_tokens(read(VOCAB_FILE)?), UserTable::from_ids(read(USERS_FILE)?)))
}
