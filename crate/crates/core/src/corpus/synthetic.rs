use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DialogueTriple;

/// Shape of a synthetic persona corpus.
///
/// Queries pick a topic and draw from shared topic/filler words. Replies echo
/// the topic with its answer words, fill the rest from the user's own Zipf
/// ranking over shared style words, and with probability
/// `signature_strength` contain one of the user's private signature tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub triples_per_user: usize,
    pub signature_strength: f64,
    pub seed: u64,
    pub signatures_per_user: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub style_words: usize,
    pub query_len: (usize, usize),
    pub reply_len: (usize, usize),
}

impl SyntheticSpec {
    pub fn new(num_users: usize, triples_per_user: usize, signature_strength: f64, seed: u64) -> Self {
        Self {
            num_users,
            triples_per_user,
            signature_strength,
            seed,
            signatures_per_user: 4,
            topics: 6,
            words_per_topic: 5,
            filler_words: 8,
            style_words: 16,
            query_len: (3, 6),
            reply_len: (3, 6),
        }
    }

    pub fn user_id(&self, u: usize) -> String {
        format!("user{u:02}")
    }

    /// Signature tokens owned by user `u`.
    pub fn signature_tokens(&self, u: usize) -> Vec<String> {
        (0..self.signatures_per_user).map(|j| format!("sig{u}x{j}")).collect()
    }
}

/// Generated triples plus the ground truth needed to audit them.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub triples: Vec<DialogueTriple>,
}

impl SyntheticCorpus {
    /// Index of the user whose signature set contains `token`.
    pub fn signature_owner(&self, token: &str) -> Option<usize> {
        let rest = token.strip_prefix("sig")?;
        let (u, j) = rest.split_once('x')?;
        let (u, j): (usize, usize) = (u.parse().ok()?, j.parse().ok()?);
        (u < self.spec.num_users && j < self.spec.signatures_per_user).then_some(u)
    }
}

/// Deterministic synthetic persona corpus; see [`SyntheticSpec`].
pub fn generate_synthetic(num_users: usize, triples_per_user: usize, signature_strength: f64, seed: u64) -> SyntheticCorpus {
    generate(SyntheticSpec::new(num_users, triples_per_user, signature_strength, seed))
}

pub fn generate(spec: SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.num_users >= 2, "need at least two users");
    assert!(
        spec.signature_strength > 0.5 && spec.signature_strength < 1.0,
        "signature strength must lie in (0.5, 1)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let topic_query = |k: usize, j: usize| format!("ask{k}x{j}");
    let topic_reply = |k: usize, j: usize| format!("ans{k}x{j}");
    let filler = |j: usize| format!("fill{j}");
    let style = |j: usize| format!("sty{j}");

    // Each user ranks the shared style words differently; weights are Zipfian
    // over that private ranking.
    let zipf: Vec<f64> = (0..spec.style_words).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let user_style: Vec<WeightedIndex<f64>> = (0..spec.num_users)
        .map(|_| {
            let mut perm: Vec<usize> = (0..spec.style_words).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut weights = vec![0.0; spec.style_words];
            for (rank, &w) in perm.iter().enumerate() {
                weights[w] = zipf[rank];
            }
            WeightedIndex::new(weights).expect("positive weights")
        })
        .collect();

    let mut triples = Vec::with_capacity(spec.num_users * spec.triples_per_user);
    for _ in 0..spec.triples_per_user {
        for (u, style_dist) in user_style.iter().enumerate() {
            let topic = rng.random_range(0..spec.topics);

            let qlen = rng.random_range(spec.query_len.0..=spec.query_len.1);
            let query: Vec<String> = (0..qlen)
                .map(|_| {
                    if rng.random_bool(0.7) {
                        topic_query(topic, rng.random_range(0..spec.words_per_topic))
                    } else {
                        filler(rng.random_range(0..spec.filler_words))
                    }
                })
                .collect();

            let rlen = rng.random_range(spec.reply_len.0..=spec.reply_len.1);
            let mut reply: Vec<String> = Vec::with_capacity(rlen);
            reply.push(topic_reply(topic, rng.random_range(0..spec.words_per_topic)));
            while reply.len() < rlen {
                reply.push(style(style_dist.sample(&mut rng)));
            }
            if rng.random_bool(spec.signature_strength) {
                let pos = rng.random_range(0..rlen);
                reply[pos] = format!("sig{u}x{}", rng.random_range(0..spec.signatures_per_user));
            }

            triples.push(DialogueTriple {
                user_id: spec.user_id(u),
                query,
                reply,
            });
        }
    }
    SyntheticCorpus { spec, triples }
}
