//! Dialogue corpus ingestion, vocabularies, user tables and splits.
//!
//! Corpus files are UTF-8 with one `user_id TAB query TAB reply` triple per
//! line. Queries and replies arrive pre-tokenized and whitespace-delimited.

mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Index of the unspecified user in every [`UserTable`].
pub const UNSPECIFIED_USER: usize = 0;
pub const UNSPECIFIED_USER_ID: &str = "<unk_u>";

pub const DEFAULT_MAX_VOCAB: usize = 20_000;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus is empty")]
    Empty,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DialogueTriple {
    pub user_id: String,
    pub query: Vec<String>,
    pub reply: Vec<String>,
}

impl DialogueTriple {
    pub fn new(user_id: impl Into<String>, query: &str, reply: &str) -> Self {
        Self {
            user_id: user_id.into(),
            query: tokenize(query),
            reply: tokenize(reply),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.user_id, self.query.join(" "), self.reply.join(" "))
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Parses one corpus line; `line_no` is 1-based and only used for errors.
pub fn parse_line(line: &str, line_no: usize) -> Result<DialogueTriple, CorpusError> {
    let err = |reason: String| CorpusError::Parse { line: line_no, reason };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
    }
    let user_id = fields[0].trim();
    if user_id.is_empty() {
        return Err(err("empty user id".into()));
    }
    let query = tokenize(fields[1]);
    let reply = tokenize(fields[2]);
    if query.is_empty() {
        return Err(err("empty query".into()));
    }
    if reply.is_empty() {
        return Err(err("empty reply".into()));
    }
    Ok(DialogueTriple {
        user_id: user_id.to_owned(),
        query,
        reply,
    })
}

pub fn parse_corpus(text: &str) -> Result<Vec<DialogueTriple>, CorpusError> {
    let triples = text
        .lines()
        .enumerate()
        .map(|(i, line)| parse_line(line.strip_suffix('\r').unwrap_or(line), i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    if triples.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(triples)
}

pub fn read_corpus(path: &Path) -> Result<Vec<DialogueTriple>, CorpusError> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn format_corpus(triples: &[DialogueTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(&t.to_line());
        out.push('\n');
    }
    out
}

pub fn write_corpus(triples: &[DialogueTriple], path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_corpus(triples).as_bytes())?;
    Ok(())
}

/// A parsed corpus together with the vocabulary and user table built from it.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub triples: Vec<DialogueTriple>,
    pub vocab: Vocabulary,
    pub users: UserTable,
}

/// Loads a corpus file. Users with fewer than `min_utterances` replies map to
/// the unspecified user. The vocabulary covers the whole file, so pass a
/// training file here; [`prepare`] splits first and builds the vocabulary from
/// the training part.
pub fn load_corpus(path: &Path, min_utterances: usize) -> Result<LoadedCorpus, CorpusError> {
    let triples = read_corpus(path)?;
    let vocab = Vocabulary::build(&triples, DEFAULT_MAX_VOCAB);
    let users = UserTable::build(&triples, min_utterances);
    Ok(LoadedCorpus { triples, vocab, users })
}

/// Train/test split with vocabulary and users derived from the training part.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<DialogueTriple>,
    pub test: Vec<DialogueTriple>,
    pub vocab: Vocabulary,
    pub users: UserTable,
}

pub fn prepare(
    triples: &[DialogueTriple],
    train_ratio: f64,
    seed: u64,
    min_utterances: usize,
    max_vocab: usize,
) -> PreparedData {
    let (train, test) = split(triples, train_ratio, seed);
    let vocab = Vocabulary::build(&train, max_vocab);
    let users = UserTable::build(&train, min_utterances);
    PreparedData {
        train,
        test,
        vocab,
        users,
    }
}

/// Per-user stratified split. Every user keeps at least one training triple;
/// both halves preserve file order.
pub fn split(triples: &[DialogueTriple], train_ratio: f64, seed: u64) -> (Vec<DialogueTriple>, Vec<DialogueTriple>) {
    assert!(
        train_ratio > 0.0 && train_ratio < 1.0,
        "train ratio must lie in (0, 1), got {train_ratio}"
    );
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in triples.iter().enumerate() {
        by_user.entry(&t.user_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; triples.len()];
    for idx in by_user.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((train_ratio * n as f64).round() as usize).clamp(1, n);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (t, keep) in triples.iter().zip(is_train) {
        if keep {
            train.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    (train, test)
}

/// Token/index map with `<pad>`, `<unk>`, `<bos>`, `<eos>` at 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent tokens (reserved included); ties
    /// break lexicographically.
    pub fn build(triples: &[DialogueTriple], max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in triples {
            for tok in t.query.iter().chain(&t.reply) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, _)| !RESERVED.contains(tok))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        Self::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t.to_owned()))
    }

    /// Reserved tokens followed by `tokens` in order; duplicates are skipped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&tok) {
                v.index.insert(tok.clone(), v.tokens.len());
                v.tokens.push(tok);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// User id/index map. Index 0 is the unspecified user and is never assigned
/// to a real user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl UserTable {
    /// Users with at least `min_utterances` replies get their own index, in
    /// sorted id order.
    pub fn build(triples: &[DialogueTriple], min_utterances: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in triples {
            *counts.entry(&t.user_id).or_default() += 1;
        }
        Self::from_ids(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_utterances)
                .map(|(u, _)| u.to_owned()),
        )
    }

    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Self {
        let mut t = Self {
            ids: vec![UNSPECIFIED_USER_ID.to_owned()],
            index: HashMap::new(),
        };
        t.index.insert(UNSPECIFIED_USER_ID.to_owned(), UNSPECIFIED_USER);
        for id in ids {
            if !t.index.contains_key(&id) {
                t.index.insert(id.clone(), t.ids.len());
                t.ids.push(id);
            }
        }
        t
    }

    /// Number of rows including the unspecified user.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() == 1
    }

    /// Index for `user_id`; unknown or filtered users map to index 0.
    pub fn index_of(&self, user_id: &str) -> usize {
        self.index.get(user_id).copied().unwrap_or(UNSPECIFIED_USER)
    }

    pub fn lookup(&self, user_id: &str) -> Option<usize> {
        self.index.get(user_id).copied()
    }

    /// Real users eligible for per-user evaluation.
    pub fn is_evaluated(&self, user_id: &str) -> bool {
        self.index_of(user_id) != UNSPECIFIED_USER
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Real (non-reserved) user ids.
    pub fn real_users(&self) -> &[String] {
        &self.ids[1..]
    }
}

/// Integer-encoded triple ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTriple {
    pub user: usize,
    pub query: Vec<usize>,
    pub reply: Vec<usize>,
}

pub fn encode_triples(triples: &[DialogueTriple], vocab: &Vocabulary, users: &UserTable) -> Vec<EncodedTriple> {
    triples
        .iter()
        .map(|t| EncodedTriple {
            user: users.index_of(&t.user_id),
            query: vocab.encode(&t.query),
            reply: vocab.encode(&t.reply),
        })
        .collect()
}

#[cfg(test)]
mod tests;
