//! Persona metrics (uRank, uPPL, uDistinct) and reference-based metrics
//! (BLEU-1, embedding Average/Extrema/Greedy).
//!
//! The pure functions here work on token sequences; [`persona`] runs the
//! model-dependent protocols on top of them.

mod embedding;
mod lm;
pub mod persona;


use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use thiserror::Error;

pub use embedding::{cosine, embedding_metrics, EmbeddingScores, WordVectors};
pub use lm::{uppl, BigramLM, PerplexityReport, DEFAULT_LAMBDA};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("word vectors: {0}")]
    Vectors(String),
    #[error("metric config: {0}")]
    Config(String),
    #[error(transparent)]
    Generation(#[from] crate::generation::GenError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Protocol settings for the persona metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Distractors per triple for uRank.
    pub n: usize,
    /// Users per query for uDistinct.
    pub m: usize,
    /// Independent z draws averaged by uRank for latent models.
    pub rounds: usize,
    pub min_user_utterances: usize,
    pub lambda: f64,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 5,
            rounds: 10,
            min_user_utterances: 1,
            lambda: DEFAULT_LAMBDA,
            beam: 10,
            max_len: crate::generation::DEFAULT_MAX_LEN,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.n == 0 || self.m < 2 || self.rounds == 0 || self.beam == 0 || self.max_len == 0 {
            return Err(MetricError::Config("need n >= 1, m >= 2, rounds >= 1, beam >= 1, max_len >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MetricError::Config("lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 - |ref| / |cand|))`. Empty candidates score 0.
pub fn bleu1<W: Hash + Eq>(candidate: &[W], reference: &[W]) -> f64 {
    assert!(!reference.is_empty(), "BLEU-1 needs a nonempty reference");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&W, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut cand_counts: HashMap<&W, usize> = HashMap::new();
    for w in candidate {
        *cand_counts.entry(w).or_default() += 1;
    }
    let clipped: usize = cand_counts
        .iter()
        .map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / candidate.len() as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0).exp();
    precision * bp
}

/// Unique n-grams over total n-grams across a response set; `None` when the
/// set holds no n-gram.
pub fn distinct_n<W: Hash + Eq + Clone>(responses: &[Vec<W>], n: usize) -> Option<f64> {
    assert!(n >= 1, "n-gram order must be positive");
    let mut seen: HashSet<&[W]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for gram in r.windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

/// Number of distractors scored strictly above the ground truth.
pub fn rank_of(truth: f64, distractors: &[f64]) -> usize {
    distractors.iter().filter(|&&d| d > truth).count()
}

/// 1 when model M ranks the ground truth strictly higher (fewer distractors
/// above it) than the reference model does, else 0.
pub fn urank_single(m_truth: f64, m_distractors: &[f64], s_truth: f64, s_distractors: &[f64]) -> f64 {
    if rank_of(m_truth, m_distractors) < rank_of(s_truth, s_distractors) {
        1.0
    } else {
        0.0
    }
}

/// Mean distinct-1/distinct-2 over groups (one group = the replies to one
/// query from m users). Groups without any token are skipped; distinct-2
/// averages over the groups that contain a bigram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistinctReport {
    pub distinct1: f64,
    pub distinct2: f64,
    pub groups: usize,
    pub skipped: usize,
}

pub fn udistinct<W: Hash + Eq + Clone>(groups: &[Vec<Vec<W>>]) -> Option<DistinctReport> {
    let (mut d1, mut d2, mut n, mut n2) = (0.0, 0.0, 0, 0);
    let mut skipped = 0;
    for g in groups {
        match distinct_n(g, 1) {
            Some(v) => {
                d1 += v;
                n += 1;
                if let Some(v2) = distinct_n(g, 2) {
                    d2 += v2;
                    n2 += 1;
                }
            }
            None => skipped += 1,
        }
    }
    (n > 0).then(|| DistinctReport {
        distinct1: d1 / n as f64,
        distinct2: if n2 > 0 { d2 / n2 as f64 } else { 0.0 },
        groups: n,
        skipped,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
