//! Reply generation (beam search, greedy) and teacher-forced reply scoring.
//!
//! Latent models draw one z per request from the user-conditioned prior, or
//! take the prior mean; every beam hypothesis shares that z.

#[cfg(test)]
mod tests;

use std::cmp::Ordering;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{NodeId, Real};
use crate::corpus::{BOS, EOS, PAD};
use crate::model::{DecodeContext, DecoderState, EncoderOutput, Model, ModelError, Net};

pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("empty query")]
    EmptyQuery,
    #[error("empty reply")]
    EmptyReply,
    #[error("beam width must be at least 1")]
    BeamWidth,
    #[error("unknown z mode `{0}` (expected sample or mean)")]
    ZMode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::autodiff::AutodiffError> for GenError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        GenError::Model(e.into())
    }
}

/// How latent models pick z at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZMode {
    #[default]
    Sample,
    Mean,
}

impl FromStr for ZMode {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(ZMode::Sample),
            "mean" => Ok(ZMode::Mean),
            _ => Err(GenError::ZMode(s.to_owned())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub query: Vec<usize>,
    pub user: usize,
    pub beam: usize,
    pub max_len: usize,
    pub z_mode: ZMode,
    pub seed: u64,
    /// Rank finished hypotheses by log-probability per token instead of the
    /// raw sum.
    pub length_normalize: bool,
}

impl GenRequest {
    pub fn new(query: Vec<usize>, user: usize) -> Self {
        Self {
            query,
            user,
            beam: 10,
            max_len: DEFAULT_MAX_LEN,
            z_mode: ZMode::Sample,
            seed: 0,
            length_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; ends in EOS when the decoder emitted it.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with the trailing EOS removed.
    pub fn reply(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.normalized()
        } else {
            self.log_prob
        }
    }
}

/// Standard-normal draws for one request's latent sample.
pub fn request_noise<T: Real>(seed: u64, dim: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| T::of(StandardNormal.sample(&mut rng))).collect()
}

/// Encodes one query and builds its single-row decoding context.
struct Prepared {
    enc: EncoderOutput,
    ctx: DecodeContext,
}

fn prepare<T: Real>(net: &mut Net<'_, T>, query: &[usize], user: usize, z_mode: ZMode, seed: u64) -> Result<Prepared, GenError> {
    if query.is_empty() {
        return Err(GenError::EmptyQuery);
    }
    let cfg = net.cfg;
    let enc = net.encode(&[query.to_vec()], cfg.use_attention)?;
    let z = if cfg.is_latent() {
        let noise = match z_mode {
            ZMode::Mean => None,
            ZMode::Sample => Some(request_noise::<T>(seed, cfg.z_dim)),
        };
        Some(net.prior_z(enc.h, &[user], noise.as_deref())?.0)
    } else {
        None
    };
    let ctx = net.decode_context(&[user], z, &enc)?;
    Ok(Prepared { enc, ctx })
}

/// Context with every per-row node replicated to `rows` rows.
fn expand<T: Real>(net: &mut Net<'_, T>, ctx: &DecodeContext, rows: usize) -> Result<DecodeContext, GenError> {
    let idx = vec![0; rows];
    let mut rep = |n: Option<NodeId>| -> Result<Option<NodeId>, GenError> {
        Ok(match n {
            Some(id) => Some(net.graph.gather(id, &idx)?),
            None => None,
        })
    };
    Ok(DecodeContext {
        z: rep(ctx.z)?,
        user: rep(ctx.user)?,
        fact_bias: rep(ctx.fact_bias)?,
        memory_mask: rep(ctx.memory_mask)?,
        memory: ctx
            .memory
            .iter()
            .map(|&m| rep(Some(m)).map(Option::unwrap))
            .collect::<Result<_, _>>()?,
    })
}

fn allowed(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Greedy decoding: the highest-probability token at every step.
pub fn greedy<T: Real>(model: &Model<T>, req: &GenRequest) -> Result<Hypothesis, GenError> {
    let mut net = model.net(false);
    let p = prepare(&mut net, &req.query, req.user, req.z_mode, req.seed)?;
    let mut state = net.init_decoder(p.enc.h)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < req.max_len {
        let prev = hyp.tokens.last().copied().unwrap_or(BOS);
        let (logp, next) = net.decode_step(&[prev], state, &p.ctx)?;
        state = next;
        let row = net.graph.value(logp).row_slice(0);
        let (best, lp) = row
            .iter()
            .enumerate()
            .filter(|&(w, _)| allowed(w))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (w, v)| {
                if v.f64() > acc.1 {
                    (w, v.f64())
                } else {
                    acc
                }
            });
        hyp.tokens.push(best);
        hyp.log_prob += lp;
        if best == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

fn rank(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> Ordering {
    b.score(length_normalize)
        .total_cmp(&a.score(length_normalize))
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Returns at most `beam` finished hypotheses, best first. The
/// greedy path always competes in the final ranking, so the top score never
/// falls below the greedy score.
pub fn generate<T: Real>(model: &Model<T>, req: &GenRequest) -> Result<Vec<Hypothesis>, GenError> {
    if req.beam == 0 {
        return Err(GenError::BeamWidth);
    }
    let mut net = model.net(false);
    let p = prepare(&mut net, &req.query, req.user, req.z_mode, req.seed)?;
    let mut state: DecoderState = net.init_decoder(p.enc.h)?;
    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for step in 0..req.max_len {
        let ctx = expand(&mut net, &p.ctx, live.len())?;
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (logp, next) = net.decode_step(&prev, state, &ctx)?;
        let table = net.graph.value(logp);
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            for (w, lp) in table.row_slice(i).iter().enumerate() {
                if allowed(w) {
                    cands.push((h.log_prob + lp.f64(), i, w));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(req.beam);

        let last_step = step + 1 == req.max_len;
        let mut parents = Vec::new();
        let mut next_live = Vec::new();
        for (lp, i, w) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(w);
            let finished = w == EOS || last_step;
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished,
            };
            if finished {
                done.push(h);
            } else {
                parents.push(i);
                next_live.push(h);
            }
        }
        if done.len() >= req.beam || next_live.is_empty() {
            break;
        }
        state = DecoderState {
            h: net.graph.gather(next.h, &parents)?,
            c: net.graph.gather(next.c, &parents)?,
        };
        live = next_live;
    }

    let g = greedy(model, req)?;
    if !done.iter().any(|h| h.tokens == g.tokens) {
        done.push(g);
    }
    done.sort_by(|a, b| rank(a, b, req.length_normalize));
    done.truncate(req.beam);
    Ok(done)
}

/// Teacher-forced log-probability (raw sum over the reply tokens, end token
/// not scored) of each reply given one query and user. Latent models share
/// one z across the replies.
pub fn score_replies<T: Real>(
    model: &Model<T>,
    query: &[usize],
    user: usize,
    replies: &[Vec<usize>],
    z_mode: ZMode,
    seed: u64,
) -> Result<Vec<f64>, GenError> {
    if replies.iter().any(Vec::is_empty) {
        return Err(GenError::EmptyReply);
    }
    if replies.is_empty() {
        return Ok(Vec::new());
    }
    let mut net = model.net(false);
    let p = prepare(&mut net, query, user, z_mode, seed)?;
    let ctx = expand(&mut net, &p.ctx, replies.len())?;
    let h = net.graph.gather(p.enc.h, &vec![0; replies.len()])?;
    let state = net.init_decoder(h)?;
    let ll = net.teacher_force(state, &ctx, replies, false)?;
    Ok(net.graph.value(ll).to_f64())
}

pub fn score_response<T: Real>(
    model: &Model<T>,
    query: &[usize],
    reply: &[usize],
    user: usize,
    z_mode: ZMode,
    seed: u64,
) -> Result<f64, GenError> {
    Ok(score_replies(model, query, user, &[reply.to_vec()], z_mode, seed)?[0])
}
