use std::collections::{HashMap, HashSet};

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

pub const DEFAULT_LAMBDA: f64 = 0.7;

#[derive(Clone, Debug, Default)]
struct Counts {
    bigram: HashMap<(String, String), usize>,
    context: HashMap<String, usize>,
}

impl Counts {
    fn add(&mut self, sentence: &[String], vocab: &HashSet<String>) {
        let mut prev = BOS.to_owned();
        for w in sentence.iter().map(|w| map_word(w, vocab)).chain([EOS.to_owned()]) {
            *self.context.entry(prev.clone()).or_default() += 1;
            *self.bigram.entry((prev, w.clone())).or_default() += 1;
            prev = w;
        }
    }

    fn get(&self, v: &str, w: &str) -> usize {
        self.bigram.get(&(v.to_owned(), w.to_owned())).copied().unwrap_or(0)
    }
}

fn map_word(w: &str, vocab: &HashSet<String>) -> String {
    if vocab.contains(w) {
        w.to_owned()
    } else {
        UNK.to_owned()
    }
}

/// Bigram model of one user's replies, linearly interpolated with an
/// add-one-smoothed background bigram model over all training replies:
///
/// ```text
/// p(w | v) = lambda * c_u(v, w) / c_u(v) + (1 - lambda) * (c_b(v, w) + 1) / (c_b(v) + |V|)
/// ```
///
/// The user term drops out (weight moves to the background) for contexts
/// the user never produced. `V` is the background vocabulary plus `</s>` and
/// `<unk>`; unknown words map to `<unk>`.
#[derive(Clone, Debug)]
pub struct BigramLM {
    pub user_id: String,
    pub lambda: f64,
    vocab: HashSet<String>,
    background: Counts,
    user: Counts,
}

impl BigramLM {
    pub fn new(user_id: impl Into<String>, background: &[Vec<String>], user: &[Vec<String>], lambda: f64) -> Self {
        assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
        let mut vocab: HashSet<String> = background.iter().flatten().cloned().collect();
        vocab.insert(EOS.to_owned());
        vocab.insert(UNK.to_owned());
        let mut bg = Counts::default();
        for s in background {
            bg.add(s, &vocab);
        }
        let mut us = Counts::default();
        for s in user {
            us.add(s, &vocab);
        }
        Self {
            user_id: user_id.into(),
            lambda,
            vocab,
            background: bg,
            user: us,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Words that can follow a context (`</s>` and `<unk>` included).
    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str)
    }

    /// `p(w | v)`; `v` may be `<s>`.
    pub fn prob(&self, v: &str, w: &str) -> f64 {
        let v = if v == BOS { BOS.to_owned() } else { map_word(v, &self.vocab) };
        let w = map_word(w, &self.vocab);
        let bg_ctx = self.background.context.get(&v).copied().unwrap_or(0);
        let bg = (self.background.get(&v, &w) + 1) as f64 / (bg_ctx + self.vocab.len()) as f64;
        match self.user.context.get(&v).copied().unwrap_or(0) {
            0 => bg,
            ctx => self.lambda * self.user.get(&v, &w) as f64 / ctx as f64 + (1.0 - self.lambda) * bg,
        }
    }

    /// Perplexity over the transitions `<s> w1 ... wn </s>`; `None` for an
    /// empty sentence.
    pub fn perplexity(&self, sentence: &[String]) -> Option<f64> {
        if sentence.is_empty() {
            return None;
        }
        let mut prev = BOS.to_owned();
        let mut log_sum = 0.0;
        let mut n = 0;
        for w in sentence.iter().map(String::as_str).chain([EOS]) {
            log_sum += self.prob(&prev, w).ln();
            n += 1;
            prev = w.to_owned();
        }
        Some((-log_sum / n as f64).exp())
    }
}

/// uPPL aggregate: per-user mean perplexity, then mean over users.
#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    pub value: f64,
    pub users: usize,
    pub responses: usize,
    pub skipped_empty: usize,
}

/// `responses[i]` are replies generated for `lms[i]`'s user.
pub fn uppl(responses: &[Vec<Vec<String>>], lms: &[BigramLM]) -> Option<PerplexityReport> {
    assert_eq!(responses.len(), lms.len(), "one response list per user model");
    let mut per_user = Vec::new();
    let mut skipped = 0;
    let mut count = 0;
    for (rs, lm) in responses.iter().zip(lms) {
        let ppl: Vec<f64> = rs.iter().filter_map(|r| lm.perplexity(r)).collect();
        skipped += rs.len() - ppl.len();
        count += ppl.len();
        if !ppl.is_empty() {
            per_user.push(ppl.iter().sum::<f64>() / ppl.len() as f64);
        }
    }
    (!per_user.is_empty()).then(|| PerplexityReport {
        value: per_user.iter().sum::<f64>() / per_user.len() as f64,
        users: per_user.len(),
        responses: count,
        skipped_empty: skipped,
    })
}
