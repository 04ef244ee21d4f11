//! Model-dependent metric protocols: distractor generation and uRank rounds,
//! reply generation for uPPL/BLEU/embedding metrics, and per-query user
//! groups for uDistinct.

use super::{mean_std, urank_single, BigramLM, MetricConfig, MetricError};
use crate::autodiff::Real;
use crate::corpus::{DialogueTriple, EncodedTriple, UserTable};
use crate::derive_seed;
use crate::generation::{generate, score_replies, GenRequest, ZMode};
use crate::model::Model;

const STREAM_UPPL: u64 = 11;
const STREAM_URANK: u64 = 12;
const STREAM_UDIST: u64 = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct UrankReport {
    /// Mean over rounds of the per-round mean over triples.
    pub value: f64,
    pub per_round: Vec<f64>,
    pub round_std: f64,
    /// Per-triple mean over rounds; `None` for skipped triples.
    pub per_triple: Vec<Option<f64>>,
    pub evaluated: usize,
    /// Triples for which the reference produced fewer than `n` distinct
    /// nonempty distractors.
    pub skipped: usize,
}

/// `n` user-irrelevant replies per triple from the reference model's beam
/// (prior mean for latent references). `None` marks a skipped triple.
pub fn distractors<T: Real>(
    reference: &Model<T>,
    triples: &[EncodedTriple],
    cfg: &MetricConfig,
) -> Result<Vec<Option<Vec<Vec<usize>>>>, MetricError> {
    triples
        .iter()
        .map(|t| {
            let req = GenRequest {
                beam: cfg.beam.max(cfg.n),
                max_len: cfg.max_len,
                z_mode: ZMode::Mean,
                ..GenRequest::new(t.query.clone(), t.user)
            };
            let mut out: Vec<Vec<usize>> = Vec::new();
            for h in generate(reference, &req)? {
                let r = h.reply().to_vec();
                if !r.is_empty() && !out.contains(&r) {
                    out.push(r);
                }
            }
            Ok((out.len() >= cfg.n).then(|| {
                out.truncate(cfg.n);
                out
            }))
        })
        .collect()
}

fn scores<T: Real>(model: &Model<T>, t: &EncodedTriple, d: &[Vec<usize>], seed: u64) -> Result<(f64, Vec<f64>), MetricError> {
    let mut replies = Vec::with_capacity(d.len() + 1);
    replies.push(t.reply.clone());
    replies.extend(d.iter().cloned());
    let s = score_replies(model, &t.query, t.user, &replies, ZMode::Sample, seed)?;
    Ok((s[0], s[1..].to_vec()))
}

/// uRank of `model` against `reference`. Latent models draw a fresh z per
/// triple and round; deterministic models are scored once and the value is
/// shared by all rounds.
pub fn urank<T: Real>(
    model: &Model<T>,
    reference: &Model<T>,
    triples: &[EncodedTriple],
    distractors: &[Option<Vec<Vec<usize>>>],
    rounds: usize,
    seed: u64,
) -> Result<UrankReport, MetricError> {
    assert_eq!(triples.len(), distractors.len(), "one distractor set per triple");
    let rounds = if model.config.is_latent() || reference.config.is_latent() {
        rounds.max(1)
    } else {
        1
    };
    let live: Vec<(usize, &EncodedTriple, &Vec<Vec<usize>>)> = triples
        .iter()
        .zip(distractors)
        .enumerate()
        .filter_map(|(i, (t, d))| d.as_ref().map(|d| (i, t, d)))
        .collect();
    let mut per_round = Vec::with_capacity(rounds);
    let mut per_triple: Vec<Option<f64>> = distractors.iter().map(|d| d.as_ref().map(|_| 0.0)).collect();
    for round in 0..rounds {
        let mut hits = 0.0;
        for &(i, t, d) in &live {
            let s = derive_seed(seed, STREAM_URANK + 100 * round as u64, i as u64);
            let (m_truth, m_d) = scores(model, t, d, s)?;
            let (s_truth, s_d) = scores(reference, t, d, s)?;
            let hit = urank_single(m_truth, &m_d, s_truth, &s_d);
            hits += hit;
            *per_triple[i].as_mut().expect("live triple") += hit / rounds as f64;
        }
        per_round.push(if live.is_empty() { 0.0 } else { hits / live.len() as f64 });
    }
    let (value, round_std) = mean_std(&per_round);
    Ok(UrankReport {
        value,
        per_round,
        round_std,
        per_triple,
        evaluated: live.len(),
        skipped: triples.len() - live.len(),
    })
}

/// Top beam reply for each `(query, user)` pair, one z draw per pair.
pub fn generate_replies<T: Real>(
    model: &Model<T>,
    items: &[(Vec<usize>, usize)],
    cfg: &MetricConfig,
    z_mode: ZMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>, MetricError> {
    items
        .iter()
        .enumerate()
        .map(|(i, (q, u))| top_reply(model, q, *u, cfg, z_mode, derive_seed(seed, STREAM_UPPL, i as u64)))
        .collect()
}

fn top_reply<T: Real>(model: &Model<T>, query: &[usize], user: usize, cfg: &MetricConfig, z_mode: ZMode, seed: u64) -> Result<Vec<usize>, MetricError> {
    let req = GenRequest {
        beam: cfg.beam,
        max_len: cfg.max_len,
        z_mode,
        seed,
        ..GenRequest::new(query.to_vec(), user)
    };
    Ok(generate(model, &req)?
        .first()
        .map(|h| h.reply().to_vec())
        .unwrap_or_default())
}

/// For each query, one reply per user in `users`.
pub fn user_groups<T: Real>(
    model: &Model<T>,
    queries: &[Vec<usize>],
    users: &[usize],
    cfg: &MetricConfig,
    z_mode: ZMode,
    seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>, MetricError> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            users
                .iter()
                .enumerate()
                .map(|(j, &u)| {
                    let s = derive_seed(seed, STREAM_UDIST, (i * users.len() + j) as u64);
                    top_reply(model, q, u, cfg, z_mode, s)
                })
                .collect()
        })
        .collect()
}

/// One bigram LM per row of `users` (`None` for the unspecified user and for
/// users below `min_utterances`). The background is every training reply.
pub fn user_lms(train: &[DialogueTriple], users: &UserTable, lambda: f64, min_utterances: usize) -> Vec<Option<BigramLM>> {
    let background: Vec<Vec<String>> = train.iter().map(|t| t.reply.clone()).collect();
    let mut own: Vec<Vec<Vec<String>>> = vec![Vec::new(); users.len()];
    for t in train {
        own[users.index_of(&t.user_id)].push(t.reply.clone());
    }
    own.iter()
        .enumerate()
        .map(|(u, replies)| {
            (u != 0 && replies.len() >= min_utterances.max(1))
                .then(|| BigramLM::new(users.id(u), &background, replies, lambda))
        })
        .collect()
}
