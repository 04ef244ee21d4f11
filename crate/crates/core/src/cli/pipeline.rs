//! Data preparation, training and evaluation shared by the subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode_triples, prepare, DialogueTriple, EncodedTriple, UserTable, Vocabulary, DEFAULT_MAX_VOCAB, UNSPECIFIED_USER};
use crate::derive_seed;
use crate::generation::ZMode;
use crate::metrics::persona::{distractors, generate_replies, urank, user_groups, user_lms, UrankReport};
use crate::metrics::{
    bleu1, embedding_metrics, udistinct, uppl, BigramLM, DistinctReport, EmbeddingScores, MetricConfig, MetricError, PerplexityReport,
    WordVectors,
};
use crate::model::{Batch, Model, ModelError, Variant};
use crate::objective::gaussian_kl;
use crate::trainer::{TrainConfig, TrainError, Trainer};

const STREAM_GROUP_USERS: u64 = 14;

/// Train/test split with encoded copies; vocabulary and users come from the
/// training part.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<DialogueTriple>,
    pub test: Vec<DialogueTriple>,
    pub vocab: Vocabulary,
    pub users: UserTable,
    pub train_enc: Vec<EncodedTriple>,
    pub test_enc: Vec<EncodedTriple>,
}

impl Dataset {
    pub fn prepare(triples: &[DialogueTriple], train_ratio: f64, seed: u64, min_utterances: usize) -> Self {
        let p = prepare(triples, train_ratio, seed, min_utterances, DEFAULT_MAX_VOCAB);
        Self::from_parts(p.train, p.test, p.vocab, p.users)
    }

    pub fn from_parts(train: Vec<DialogueTriple>, test: Vec<DialogueTriple>, vocab: Vocabulary, users: UserTable) -> Self {
        let train_enc = encode_triples(&train, &vocab, &users);
        let test_enc = encode_triples(&test, &vocab, &users);
        Self {
            train,
            test,
            vocab,
            users,
            train_enc,
            test_enc,
        }
    }

    /// `cfg` with vocabulary size and user count taken from this data.
    pub fn resolve(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        cfg.model.vocab_size = self.vocab.len();
        cfg.model.num_users = self.users.len();
        cfg
    }
}

/// Trains a fresh model on `data.train`; with `out` set the trainer writes
/// its checkpoint files there.
pub fn train_model(cfg: &TrainConfig, data: &Dataset, seed: u64, out: Option<&Path>) -> Result<Model<f32>, TrainError> {
    let mut t = Trainer::new(data.resolve(cfg), &data.train_enc, seed)?;
    t.run(out)?;
    Ok(t.model)
}

/// Held-out averages of `KL(q || p_user) - KL(q || p_unk)` and of the mean
/// prior-variance difference `sigma_user^2 - sigma_unk^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerGaps {
    pub kl_gap: f64,
    pub variance_gap: f64,
    pub rows: usize,
}

/// Gaps over the triples of real users; `None` for non-latent models or
/// when no such triple exists.
pub fn regularizer_gaps(model: &Model<f32>, triples: &[EncodedTriple], batch_size: usize) -> Result<Option<RegularizerGaps>, ModelError> {
    if !model.config.is_latent() {
        return Ok(None);
    }
    let rows: Vec<&EncodedTriple> = triples.iter().filter(|t| t.user != UNSPECIFIED_USER).collect();
    let (mut kl, mut var) = (0.0, 0.0);
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = Batch::from_triples(chunk.iter().copied());
        let noise = vec![0.0f32; chunk.len() * model.config.z_dim];
        let mut net = model.net(false);
        let out = net.forward_train(&batch, Some(&noise))?;
        let lat = out.latent.expect("latent model");
        for r in 0..chunk.len() {
            let q = net.gaussian(lat.posterior, r);
            let pu = net.gaussian(lat.prior_user, r);
            let pk = net.gaussian(lat.prior_unk, r);
            let kl_of = |p| gaussian_kl(&q, p).map_err(|e| ModelError::Config(e.to_string()));
            kl += kl_of(&pu)? - kl_of(&pk)?;
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            var += mean(pu.variance()) - mean(pk.variance());
        }
    }
    Ok((!rows.is_empty()).then(|| RegularizerGaps {
        kl_gap: kl / rows.len() as f64,
        variance_gap: var / rows.len() as f64,
        rows: rows.len(),
    }))
}

/// A named training configuration in a comparison. Besides the variant
/// names, accepts the ablation labels `w/o R1`, `w/o R2` and `w/o UE`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: TrainConfig,
}

impl Arm {
    pub fn parse(label: &str, base: &TrainConfig) -> Result<Self, TrainError> {
        let mut config = base.clone();
        let norm = label.trim().to_ascii_uppercase().replace([' ', '-', '_'], "");
        let ablation = |config: &mut TrainConfig| config.model = config.model.with_variant(Variant::PaGenerator);
        let label = match norm.as_str() {
            "W/OR1" => {
                ablation(&mut config);
                config.model.use_r1 = false;
                "w/o R1".to_owned()
            }
            "W/OR2" => {
                ablation(&mut config);
                config.model.use_r2 = false;
                "w/o R2".to_owned()
            }
            "W/OUE" => {
                ablation(&mut config);
                config.model.decode_with_user = false;
                "w/o UE".to_owned()
            }
            _ => {
                let v: Variant = label.parse()?;
                config.model = config.model.with_variant(v);
                v.name().to_owned()
            }
        };
        Ok(Self { label, config })
    }
}

/// Which metric families to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSet {
    pub urank: bool,
    pub uppl: bool,
    pub udistinct: bool,
    pub bleu1: bool,
    pub embed: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        urank: true,
        uppl: true,
        udistinct: true,
        bleu1: true,
        embed: true,
    };
}

impl FromStr for MetricSet {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut m = MetricSet {
            urank: false,
            uppl: false,
            udistinct: false,
            bleu1: false,
            embed: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "urank" => m.urank = true,
                "uppl" => m.uppl = true,
                "udistinct" => m.udistinct = true,
                "bleu1" | "bleu" => m.bleu1 = true,
                "embed" => m.embed = true,
                other => return Err(MetricError::Config(format!("unknown metric `{other}`"))),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub metrics: MetricSet,
    pub config: MetricConfig,
    pub z_mode: ZMode,
    pub seed: u64,
    /// Cap on uDistinct queries; 0 uses every test query.
    pub max_queries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: MetricSet::ALL,
            config: MetricConfig::default(),
            z_mode: ZMode::Sample,
            seed: 0,
            max_queries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub user: String,
    pub reply: String,
    pub bleu1: Option<f64>,
    pub embed: Option<EmbeddingScores>,
    pub perplexity: Option<f64>,
    pub urank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub bleu1: Option<f64>,
    pub embed: Option<EmbeddingScores>,
    pub embed_skipped: usize,
    pub urank: Option<UrankReport>,
    pub uppl: Option<PerplexityReport>,
    pub udistinct: Option<DistinctReport>,
    pub items: Vec<ItemScore>,
}

/// Test triples whose user has an index of their own.
fn evaluated(data: &Dataset) -> Vec<usize> {
    (0..data.test_enc.len())
        .filter(|&i| data.test_enc[i].user != UNSPECIFIED_USER)
        .collect()
}

/// Runs the selected metrics for `model` on the test split. `reference` is
/// the seq2seq baseline for uRank; its beam supplies the distractors.
pub fn evaluate(
    label: &str,
    model: &Model<f32>,
    reference: &Model<f32>,
    data: &Dataset,
    vectors: Option<&WordVectors>,
    opts: &EvalOptions,
) -> Result<EvalReport, MetricError> {
    opts.config.validate()?;
    let rows = evaluated(data);
    let triples: Vec<EncodedTriple> = rows.iter().map(|&i| data.test_enc[i].clone()).collect();
    let mut items: Vec<ItemScore> = rows
        .iter()
        .map(|&i| ItemScore {
            user: data.test[i].user_id.clone(),
            reply: String::new(),
            bleu1: None,
            embed: None,
            perplexity: None,
            urank: None,
        })
        .collect();
    let mut report = EvalReport {
        label: label.to_owned(),
        bleu1: None,
        embed: None,
        embed_skipped: 0,
        urank: None,
        uppl: None,
        udistinct: None,
        items: Vec::new(),
    };

    let m = opts.metrics;
    let want_embed = m.embed && vectors.is_some();
    if m.uppl || m.bleu1 || want_embed {
        let queries: Vec<(Vec<usize>, usize)> = triples.iter().map(|t| (t.query.clone(), t.user)).collect();
        let replies: Vec<Vec<String>> = generate_replies(model, &queries, &opts.config, opts.z_mode, opts.seed)?
            .iter()
            .map(|r| data.vocab.decode(r))
            .collect();
        for (item, r) in items.iter_mut().zip(&replies) {
            item.reply = r.join(" ");
        }
        if m.bleu1 {
            let mut sum = 0.0;
            for ((item, r), &i) in items.iter_mut().zip(&replies).zip(&rows) {
                let b = bleu1(r, &data.test[i].reply);
                item.bleu1 = Some(b);
                sum += b;
            }
            report.bleu1 = (!rows.is_empty()).then(|| sum / rows.len() as f64);
        }
        if let (true, Some(wv)) = (m.embed, vectors) {
            let mut acc = [0.0; 3];
            let mut n = 0;
            for ((item, r), &i) in items.iter_mut().zip(&replies).zip(&rows) {
                item.embed = embedding_metrics(r, &data.test[i].reply, wv);
                match item.embed {
                    Some(e) => {
                        acc[0] += e.average;
                        acc[1] += e.extrema;
                        acc[2] += e.greedy;
                        n += 1;
                    }
                    None => report.embed_skipped += 1,
                }
            }
            report.embed = (n > 0).then(|| EmbeddingScores {
                average: acc[0] / n as f64,
                extrema: acc[1] / n as f64,
                greedy: acc[2] / n as f64,
            });
        }
        if m.uppl {
            let lms = user_lms(&data.train, &data.users, opts.config.lambda, opts.config.min_user_utterances);
            let mut per_user: Vec<Vec<Vec<String>>> = vec![Vec::new(); lms.len()];
            for (item_idx, t) in triples.iter().enumerate() {
                if let Some(lm) = &lms[t.user] {
                    items[item_idx].perplexity = lm.perplexity(&replies[item_idx]);
                    per_user[t.user].push(replies[item_idx].clone());
                }
            }
            let (responses, models): (Vec<Vec<Vec<String>>>, Vec<BigramLM>) = per_user
                .into_iter()
                .zip(lms)
                .filter_map(|(rs, lm)| lm.filter(|_| !rs.is_empty()).map(|lm| (rs, lm)))
                .unzip();
            report.uppl = uppl(&responses, &models);
        }
    }

    if m.urank {
        let d = distractors(reference, &triples, &opts.config)?;
        let r = urank(model, reference, &triples, &d, opts.config.rounds, opts.seed)?;
        for (item, v) in items.iter_mut().zip(&r.per_triple) {
            item.urank = *v;
        }
        report.urank = Some(r);
    }

    if m.udistinct {
        let groups = distinct_groups(model, data, opts)?;
        let decoded: Vec<Vec<Vec<String>>> = groups
            .iter()
            .map(|g| g.iter().map(|r| data.vocab.decode(r)).collect())
            .collect();
        report.udistinct = udistinct(&decoded);
    }
    report.items = items;
    Ok(report)
}

/// One reply per user for each distinct test query, `m` users per query
/// drawn without replacement (all real users when fewer than `m` exist).
fn distinct_groups(model: &Model<f32>, data: &Dataset, opts: &EvalOptions) -> Result<Vec<Vec<Vec<usize>>>, MetricError> {
    let mut queries: Vec<Vec<usize>> = Vec::new();
    for &i in &evaluated(data) {
        let q = &data.test_enc[i].query;
        if !queries.contains(q) {
            queries.push(q.clone());
        }
    }
    if opts.max_queries > 0 {
        queries.truncate(opts.max_queries);
    }
    let real = data.users.len() - 1;
    let m = opts.config.m.min(real);
    if m < 2 {
        return Err(MetricError::Config(format!("uDistinct needs at least two users, have {real}")));
    }
    let mut groups = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, STREAM_GROUP_USERS, qi as u64));
        let mut users: Vec<usize> = sample(&mut rng, real, m).into_iter().map(|u| u + 1).collect();
        users.sort_unstable();
        let seed = derive_seed(opts.seed, STREAM_GROUP_USERS, qi as u64 | 1 << 40);
        groups.extend(user_groups(model, std::slice::from_ref(q), &users, &opts.config, opts.z_mode, seed)?);
    }
    Ok(groups)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:?}"))
}

fn quote(field: &str) -> String {
    format!("\"{}\"", field.replace('"', "\"\""))
}

impl EvalReport {
    /// Flat `key=value` summary; floats print in round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("writing to a String");
        kv("label", self.label.clone());
        kv("bleu1", opt(self.bleu1));
        kv("embed_average", opt(self.embed.map(|e| e.average)));
        kv("embed_extrema", opt(self.embed.map(|e| e.extrema)));
        kv("embed_greedy", opt(self.embed.map(|e| e.greedy)));
        kv("embed_skipped", self.embed_skipped.to_string());
        kv("urank", opt(self.urank.as_ref().map(|r| r.value)));
        kv("urank_round_std", opt(self.urank.as_ref().map(|r| r.round_std)));
        kv("urank_rounds", self.urank.as_ref().map_or(0, |r| r.per_round.len()).to_string());
        kv("urank_evaluated", self.urank.as_ref().map_or(0, |r| r.evaluated).to_string());
        kv("urank_skipped", self.urank.as_ref().map_or(0, |r| r.skipped).to_string());
        kv("uppl", opt(self.uppl.as_ref().map(|r| r.value)));
        kv("uppl_users", self.uppl.as_ref().map_or(0, |r| r.users).to_string());
        kv("uppl_skipped_empty", self.uppl.as_ref().map_or(0, |r| r.skipped_empty).to_string());
        kv("udist1", opt(self.udistinct.map(|r| r.distinct1)));
        kv("udist2", opt(self.udistinct.map(|r| r.distinct2)));
        kv("udist_groups", self.udistinct.map_or(0, |r| r.groups).to_string());
        kv("udist_skipped", self.udistinct.map_or(0, |r| r.skipped).to_string());
        s
    }

    /// Per-item scores, one row per evaluated test triple.
    pub fn items_csv(&self) -> String {
        let mut s = String::from("index,user,bleu1,average,extrema,greedy,perplexity,urank,reply\n");
        for (i, it) in self.items.iter().enumerate() {
            writeln!(
                s,
                "{i},{},{},{},{},{},{},{},{}",
                it.user,
                opt(it.bleu1),
                opt(it.embed.map(|e| e.average)),
                opt(it.embed.map(|e| e.extrema)),
                opt(it.embed.map(|e| e.greedy)),
                opt(it.perplexity),
                opt(it.urank),
                quote(&it.reply)
            )
            .expect("writing to a String");
        }
        s
    }
}
