use std::collections::HashMap;

use super::{GaussianParams, Model, ModelConfig, ModelError, ParameterStore, Variant};
use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::corpus::{BOS, EOS, PAD, UNSPECIFIED_USER};

/// Additive attention-mask value for padded encoder positions.
const MASKED: f64 = -1e9;

/// Mean and log-variance nodes, each `[batch, z_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch, 2 * encoder_hidden]`: final forward state then final backward state.
    pub h: NodeId,
    /// Per-position `[batch, 2 * encoder_hidden]` states; empty unless requested.
    pub states: Vec<NodeId>,
    /// Additive `[batch, positions]` mask, present when the batch is ragged.
    pub mask: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Per-row conditioning held fixed across decoder steps.
#[derive(Clone, Debug, Default)]
pub struct DecodeContext {
    pub z: Option<NodeId>,
    pub user: Option<NodeId>,
    pub fact_bias: Option<NodeId>,
    pub memory: Vec<NodeId>,
    pub memory_mask: Option<NodeId>,
}

/// Integer-encoded examples with per-row users.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub queries: Vec<Vec<usize>>,
    pub replies: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a crate::corpus::EncodedTriple>) -> Self {
        let mut b = Batch {
            users: Vec::new(),
            queries: Vec::new(),
            replies: Vec::new(),
        };
        for t in triples {
            b.users.push(t.user);
            b.queries.push(t.query.clone());
            b.replies.push(t.reply.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Latent-path nodes produced during training.
#[derive(Clone, Debug)]
pub struct LatentOutputs {
    pub prior_user: GaussNodes,
    pub prior_unk: GaussNodes,
    pub posterior: GaussNodes,
    pub z: NodeId,
    /// Per-row bag-of-words negative log-likelihood, `[batch, 1]`.
    pub bow: NodeId,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub batch_size: usize,
    /// Per-row reconstruction negative log-likelihood, `[batch, 1]`.
    pub recon: NodeId,
    pub latent: Option<LatentOutputs>,
}

/// One computation graph bound to a model's parameters.
///
/// Parameters become graph leaves on first use; with `trainable` set they
/// require gradients and carry their store names.
pub struct Net<'m, T> {
    pub cfg: &'m ModelConfig,
    store: &'m ParameterStore<T>,
    pub graph: Graph<T>,
    bound: HashMap<String, NodeId>,
    trainable: bool,
}

impl<T: Real> Model<T> {
    pub fn net(&self, trainable: bool) -> Net<'_, T> {
        Net {
            cfg: &self.config,
            store: &self.params,
            graph: Graph::new(),
            bound: HashMap::new(),
            trainable,
        }
    }
}

impl<'m, T: Real> Net<'m, T> {
    pub fn param(&mut self, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let mut t = self.store.require(name)?.clone();
        t.requires_grad = self.trainable;
        let id = self.graph.named_leaf(name, t);
        self.bound.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> NodeId {
        self.graph.constant(Tensor::new(shape, data))
    }

    fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.graph.constant(Tensor::zeros(vec![rows, cols]))
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    /// One LSTM step with gate order input, forget, cell, output.
    pub fn lstm_step(&mut self, x: NodeId, st: DecoderState, prefix: &str) -> Result<DecoderState, ModelError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let u = self.param(&format!("{prefix}.u"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let hidden = self.graph.shape(u)[0];
        let g = &mut self.graph;
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(st.h, u)?;
        let pre = g.add(xw, hu)?;
        let pre = g.add_row(pre, b)?;
        let i = g.slice_cols(pre, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(pre, hidden, 2 * hidden)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice_cols(pre, 2 * hidden, 3 * hidden)?;
        let cand = g.tanh(cand)?;
        let o = g.slice_cols(pre, 3 * hidden, 4 * hidden)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, st.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(DecoderState { h, c })
    }

    /// `old + mask * (new - old)` with a 0/1 row mask.
    fn masked_update(&mut self, old: NodeId, new: NodeId, mask: NodeId) -> Result<NodeId, ModelError> {
        let g = &mut self.graph;
        let d = g.sub(new, old)?;
        let d = g.mul(d, mask)?;
        Ok(g.add(old, d)?)
    }

    fn row_mask(&mut self, valid: &[bool], cols: usize) -> NodeId {
        let data = valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, cols))
            .collect();
        self.constant(vec![valid.len(), cols], data)
    }

    pub fn embed_words(&mut self, tokens: &[usize]) -> Result<NodeId, ModelError> {
        let table = self.param("embed.word")?;
        Ok(self.graph.gather(table, tokens)?)
    }

    /// Shared bidirectional encoder over a padded batch of token sequences.
    pub fn encode(&mut self, seqs: &[Vec<usize>], with_states: bool) -> Result<EncoderOutput, ModelError> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("encoder input"));
        }
        let b = seqs.len();
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let he = self.cfg.encoder_hidden;
        let ragged = seqs.iter().any(|s| s.len() != steps);

        let run = |net: &mut Self, prefix: &str, order: Vec<usize>| -> Result<(NodeId, Vec<NodeId>), ModelError> {
            let mut st = DecoderState {
                h: net.zeros(b, he),
                c: net.zeros(b, he),
            };
            let mut per_pos = vec![st.h; steps];
            for t in order {
                let toks: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
                let x = net.embed_words(&toks)?;
                let next = net.lstm_step(x, st, prefix)?;
                let valid: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
                st = if valid.iter().all(|&v| v) {
                    next
                } else {
                    let m = net.row_mask(&valid, he);
                    DecoderState {
                        h: net.masked_update(st.h, next.h, m)?,
                        c: net.masked_update(st.c, next.c, m)?,
                    }
                };
                per_pos[t] = st.h;
            }
            Ok((st.h, per_pos))
        };
        let (fwd, fwd_states) = run(self, "enc.fwd", (0..steps).collect())?;
        let (bwd, bwd_states) = run(self, "enc.bwd", (0..steps).rev().collect())?;
        let h = self.graph.concat(&[fwd, bwd])?;

        let mut states = Vec::new();
        let mut mask = None;
        if with_states {
            for t in 0..steps {
                states.push(self.graph.concat(&[fwd_states[t], bwd_states[t]])?);
            }
            if ragged {
                let data = seqs
                    .iter()
                    .flat_map(|s| (0..steps).map(move |t| if t < s.len() { T::zero() } else { T::of(MASKED) }))
                    .collect();
                mask = Some(self.constant(vec![b, steps], data));
            }
        }
        Ok(EncoderOutput { h, states, mask })
    }

    fn gaussian_head(&mut self, a: NodeId, b: NodeId, prefix: &str) -> Result<GaussNodes, ModelError> {
        let x = self.graph.concat(&[a, b])?;
        let out = self.linear(x, prefix)?;
        let z = self.cfg.z_dim;
        if self.graph.shape(out)[1] != 2 * z {
            return Err(ModelError::Config(format!("{prefix} produces {:?}, expected 2*z_dim", self.graph.shape(out))));
        }
        Ok(GaussNodes {
            mu: self.graph.slice_cols(out, 0, z)?,
            log_var: self.graph.slice_cols(out, z, 2 * z)?,
        })
    }

    /// p(z | q, u): one affine layer on `[h_q; e_u]`.
    pub fn prior_net(&mut self, h_q: NodeId, e_u: NodeId) -> Result<GaussNodes, ModelError> {
        self.gaussian_head(h_q, e_u, "prior")
    }

    /// q(z | q, r): one affine layer on `[h_q; h_r]`.
    pub fn posterior_net(&mut self, h_q: NodeId, h_r: NodeId) -> Result<GaussNodes, ModelError> {
        self.gaussian_head(h_q, h_r, "post")
    }

    pub fn user_embedding(&mut self, users: &[usize]) -> Result<NodeId, ModelError> {
        self.check_users(users)?;
        let table = self.param("embed.user")?;
        Ok(self.graph.gather(table, users)?)
    }

    fn check_users(&self, users: &[usize]) -> Result<(), ModelError> {
        match users.iter().find(|&&u| u >= self.cfg.num_users) {
            Some(&u) => Err(ModelError::UnknownUser {
                index: u,
                rows: self.cfg.num_users,
            }),
            None => Ok(()),
        }
    }

    /// Reparameterized sample `mu + exp(log_var / 2) * noise`.
    pub fn sample_z(&mut self, g: GaussNodes, noise: NodeId) -> Result<NodeId, ModelError> {
        let gr = &mut self.graph;
        let half = gr.scale(g.log_var, 0.5)?;
        let std = gr.exp(half)?;
        let eps = gr.mul(std, noise)?;
        Ok(gr.add(g.mu, eps)?)
    }

    /// Per-user factored logit bias, `[batch, vocab]`.
    pub fn fact_bias_logits(&mut self, users: &[usize]) -> Result<NodeId, ModelError> {
        self.check_users(users)?;
        let factors = self.param("fact.user")?;
        let proj = self.param("fact.proj")?;
        let f = self.graph.gather(factors, users)?;
        Ok(self.graph.matmul(f, proj)?)
    }

    pub fn init_decoder(&mut self, h_q: NodeId) -> Result<DecoderState, ModelError> {
        let pre = self.linear(h_q, "dec.init")?;
        let h = self.graph.tanh(pre)?;
        let rows = self.graph.value(h_q).rows();
        let c = self.zeros(rows, self.cfg.decoder_hidden);
        Ok(DecoderState { h, c })
    }

    fn attend(&mut self, h: NodeId, memory: &[NodeId], mask: Option<NodeId>) -> Result<NodeId, ModelError> {
        let width = self.cfg.encoder_out();
        let mut scores = Vec::with_capacity(memory.len());
        for &m in memory {
            let prod = self.graph.mul(m, h)?;
            scores.push(self.graph.sum_cols(prod)?);
        }
        let mut s = self.graph.concat(&scores)?;
        if let Some(mask) = mask {
            s = self.graph.add(s, mask)?;
        }
        let weights = self.graph.softmax(s)?;
        let mut ctx = None;
        for (t, &m) in memory.iter().enumerate() {
            let w = self.graph.slice_cols(weights, t, t + 1)?;
            let w = self.graph.repeat_cols(w, width)?;
            let term = self.graph.mul(w, m)?;
            ctx = Some(match ctx {
                None => term,
                Some(acc) => self.graph.add(acc, term)?,
            });
        }
        let ctx = ctx.ok_or(ModelError::EmptyInput("attention memory"))?;
        let joined = self.graph.concat(&[ctx, h])?;
        let pre = self.linear(joined, "attn.combine")?;
        Ok(self.graph.tanh(pre)?)
    }

    /// One decoder step: returns next-token log-probabilities `[rows, vocab]`.
    pub fn decode_step(
        &mut self,
        prev: &[usize],
        state: DecoderState,
        ctx: &DecodeContext,
    ) -> Result<(NodeId, DecoderState), ModelError> {
        let mut parts = vec![self.embed_words(prev)?];
        if self.cfg.is_latent() {
            parts.push(ctx.z.ok_or(ModelError::MissingLatent)?);
        }
        if self.cfg.decoder_uses_user() {
            parts.push(ctx.user.ok_or(ModelError::MissingUser)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            self.graph.concat(&parts)?
        };
        let next = self.lstm_step(x, state, "dec.lstm")?;
        let out = if self.cfg.use_attention {
            self.attend(next.h, &ctx.memory, ctx.memory_mask)?
        } else {
            next.h
        };
        let mut logits = self.linear(out, "out")?;
        if let Some(bias) = ctx.fact_bias {
            logits = self.graph.add(logits, bias)?;
        }
        Ok((self.graph.log_softmax(logits)?, next))
    }

    /// Builds decoding context for rows with the given users and latent sample.
    pub fn decode_context(&mut self, users: &[usize], z: Option<NodeId>, enc: &EncoderOutput) -> Result<DecodeContext, ModelError> {
        let mut ctx = DecodeContext {
            z,
            ..Default::default()
        };
        if self.cfg.decoder_uses_user() {
            ctx.user = Some(self.user_embedding(users)?);
        }
        if self.cfg.variant == Variant::FactBias {
            ctx.fact_bias = Some(self.fact_bias_logits(users)?);
        }
        if self.cfg.use_attention {
            ctx.memory = enc.states.clone();
            ctx.memory_mask = enc.mask;
        }
        Ok(ctx)
    }

    /// Teacher-forced per-row log-likelihood of `replies`, `[rows, 1]`. With
    /// `with_eos` the closing EOS is scored too.
    pub fn teacher_force(
        &mut self,
        state: DecoderState,
        ctx: &DecodeContext,
        replies: &[Vec<usize>],
        with_eos: bool,
    ) -> Result<NodeId, ModelError> {
        if replies.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyInput("reply"));
        }
        let steps = replies.iter().map(Vec::len).max().unwrap_or(0) + usize::from(with_eos);
        let mut st = state;
        let mut total: Option<NodeId> = None;
        for t in 0..steps {
            let prev: Vec<usize> = replies
                .iter()
                .map(|r| if t == 0 { BOS } else { r.get(t - 1).copied().unwrap_or(PAD) })
                .collect();
            let target: Vec<usize> = replies
                .iter()
                .map(|r| match t.cmp(&r.len()) {
                    std::cmp::Ordering::Less => r[t],
                    std::cmp::Ordering::Equal => EOS,
                    std::cmp::Ordering::Greater => PAD,
                })
                .collect();
            let (logp, next) = self.decode_step(&prev, st, ctx)?;
            st = next;
            let mut ll = self.graph.pick(logp, &target)?;
            let valid: Vec<bool> = replies.iter().map(|r| t < r.len() || (with_eos && t == r.len())).collect();
            if !valid.iter().all(|&v| v) {
                let m = self.row_mask(&valid, 1);
                ll = self.graph.mul(ll, m)?;
            }
            total = Some(match total {
                None => ll,
                Some(acc) => self.graph.add(acc, ll)?,
            });
        }
        Ok(total.expect("at least one step"))
    }

    /// Bag-of-words negative log-likelihood per row, `[rows, 1]`.
    pub fn bow_nll(&mut self, z: NodeId, h_q: NodeId, e_u: NodeId, replies: &[Vec<usize>]) -> Result<NodeId, ModelError> {
        let x = self.graph.concat(&[z, h_q, e_u])?;
        let hidden = self.linear(x, "bow.hidden")?;
        let hidden = self.graph.tanh(hidden)?;
        let logits = self.linear(hidden, "bow.out")?;
        let logp = self.graph.log_softmax(logits)?;
        let v = self.cfg.vocab_size;
        let mut counts = vec![T::zero(); replies.len() * v];
        for (r, reply) in replies.iter().enumerate() {
            for &tok in reply {
                counts[r * v + tok] = counts[r * v + tok] + T::one();
            }
        }
        let counts = self.constant(vec![replies.len(), v], counts);
        let weighted = self.graph.mul(counts, logp)?;
        let ll = self.graph.sum_cols(weighted)?;
        Ok(self.graph.scale(ll, -1.0)?)
    }

    /// Full training-time forward pass with teacher forcing. `noise` holds
    /// `batch * z_dim` standard-normal draws for latent variants.
    pub fn forward_train(&mut self, batch: &Batch, noise: Option<&[T]>) -> Result<ForwardOutputs, ModelError> {
        let b = batch.len();
        if b == 0 {
            return Err(ModelError::EmptyInput("batch"));
        }
        let cfg = self.cfg;
        let enc_q = self.encode(&batch.queries, cfg.use_attention)?;
        let mut latent = None;
        let mut z = None;
        if cfg.is_latent() {
            let noise = noise.ok_or(ModelError::MissingLatent)?;
            if noise.len() != b * cfg.z_dim {
                return Err(ModelError::Config(format!(
                    "noise has {} values, expected {}",
                    noise.len(),
                    b * cfg.z_dim
                )));
            }
            let enc_r = self.encode(&batch.replies, false)?;
            let prior_users: Vec<usize> = batch.users.iter().map(|&u| cfg.prior_user(u)).collect();
            let e_u = self.user_embedding(&prior_users)?;
            let prior_user = self.prior_net(enc_q.h, e_u)?;
            let e_unk = self.user_embedding(&vec![UNSPECIFIED_USER; b])?;
            let prior_unk = self.prior_net(enc_q.h, e_unk)?;
            let posterior = self.posterior_net(enc_q.h, enc_r.h)?;
            let eps = self.constant(vec![b, cfg.z_dim], noise.to_vec());
            let sample = self.sample_z(posterior, eps)?;
            let bow = self.bow_nll(sample, enc_q.h, e_u, &batch.replies)?;
            z = Some(sample);
            latent = Some(LatentOutputs {
                prior_user,
                prior_unk,
                posterior,
                z: sample,
                bow,
            });
        }
        let ctx = self.decode_context(&batch.users, z, &enc_q)?;
        let state = self.init_decoder(enc_q.h)?;
        let ll = self.teacher_force(state, &ctx, &batch.replies, true)?;
        let recon = self.graph.scale(ll, -1.0)?;
        Ok(ForwardOutputs {
            batch_size: b,
            recon,
            latent,
        })
    }

    /// z for inference from the user-conditioned prior: the mean when
    /// `noise` is `None`, otherwise a reparameterized sample.
    pub fn prior_z(&mut self, h_q: NodeId, users: &[usize], noise: Option<&[T]>) -> Result<(NodeId, GaussNodes), ModelError> {
        let prior_users: Vec<usize> = users.iter().map(|&u| self.cfg.prior_user(u)).collect();
        let e_u = self.user_embedding(&prior_users)?;
        let prior = self.prior_net(h_q, e_u)?;
        let z = match noise {
            None => prior.mu,
            Some(n) => {
                let eps = self.constant(vec![users.len(), self.cfg.z_dim], n.to_vec());
                self.sample_z(prior, eps)?
            }
        };
        Ok((z, prior))
    }

    pub fn gaussian(&self, g: GaussNodes, row: usize) -> GaussianParams {
        GaussianParams {
            mu: self.graph.value(g.mu).row_slice(row).iter().map(|v| v.f64()).collect(),
            log_var: self.graph.value(g.log_var).row_slice(row).iter().map(|v| v.f64()).collect(),
        }
    }
}
