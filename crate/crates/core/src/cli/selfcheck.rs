//! Gradient checks and metric oracles run by `pagen selfcheck`.
//!
//! The oracles recompute each metric by brute force, in a deliberately
//! different style from the library code, on seeded random inputs.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check, primitive_suite, GradCheckOptions, GradCheckReport};
use crate::metrics::{bleu1, distinct_n, embedding_metrics, urank_single, BigramLM, WordVectors};
use crate::model::{Batch, GaussianParams, Model, ModelConfig, Variant};
use crate::objective::{gaussian_kl, total_loss, ObjectiveError};

/// Gradient check of the full PAGENERATOR loss on a two-example batch.
pub fn pagenerator_loss_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, ObjectiveError> {
    let cfg = ModelConfig {
        word_embed_dim: 5,
        user_embed_dim: 3,
        encoder_hidden: 3,
        decoder_hidden: 6,
        z_dim: 2,
        bow_hidden: 4,
        fact_rank: 2,
        vocab_size: 10,
        num_users: 3,
        init_scale: 0.4,
        ..ModelConfig::new(Variant::PaGenerator)
    };
    let model = Model::<f64>::new(cfg, seed).expect("valid config");
    let batch = Batch {
        users: vec![1, 2],
        queries: vec![vec![4, 5, 6], vec![7, 8]],
        replies: vec![vec![8, 9], vec![5, 6, 4]],
    };
    let noise = [0.3, -1.1, 0.8, 0.05];
    let mut net = model.net(true);
    let (nodes, _) = total_loss(&mut net, &batch, Some(&noise), 0.7)?;
    Ok(grad_check(&mut net.graph, nodes.total, opts)?)
}

fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> GaussianParams {
    GaussianParams {
        mu: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        log_var: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Monte Carlo estimate of KL(a || b) from `n` draws of `a`.
pub fn kl_monte_carlo(a: &GaussianParams, b: &GaussianParams, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let log_pdf = |x: f64, mu: f64, lv: f64| -0.5 * (lv + (x - mu).powi(2) / lv.exp() + (2.0 * std::f64::consts::PI).ln());
    let normals: Vec<Normal<f64>> = a
        .mu
        .iter()
        .zip(&a.log_var)
        .map(|(&m, &lv)| Normal::new(m, (0.5 * lv).exp()).expect("finite sigma"))
        .collect();
    let mut total = 0.0;
    for _ in 0..n {
        for (i, d) in normals.iter().enumerate() {
            let x = d.sample(rng);
            total += log_pdf(x, a.mu[i], a.log_var[i]) - log_pdf(x, b.mu[i], b.log_var[i]);
        }
    }
    total / n as f64
}

#[derive(Clone, Debug)]
pub struct KlOracle {
    pub pairs: usize,
    pub max_rel_error: f64,
    pub max_self_kl: f64,
}

/// Closed-form KL against Monte Carlo on random 4-dim pairs.
pub fn kl_oracle(seed: u64, pairs: usize, samples: usize) -> KlOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = KlOracle {
        pairs,
        max_rel_error: 0.0,
        max_self_kl: 0.0,
    };
    for _ in 0..pairs {
        let a = random_gaussian(&mut rng, 4);
        let b = random_gaussian(&mut rng, 4);
        let exact = gaussian_kl(&a, &b).expect("same dims");
        let mc = kl_monte_carlo(&a, &b, samples, &mut rng);
        out.max_rel_error = out.max_rel_error.max((exact - mc).abs() / exact.abs());
        out.max_self_kl = out.max_self_kl.max(gaussian_kl(&a, &a).expect("same dims").abs());
    }
    out
}

fn random_sentence(rng: &mut ChaCha8Rng, min: usize, vocab: usize) -> Vec<String> {
    let len = rng.random_range(min..=8);
    (0..len).map(|_| format!("t{}", rng.random_range(0..vocab))).collect()
}

fn bleu1_brute(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    // match candidate tokens one by one against an unused reference copy
    let mut pool: Vec<Option<&String>> = r.iter().map(Some).collect();
    let mut matched = 0;
    for w in c {
        if let Some(slot) = pool.iter_mut().find(|s| **s == Some(w)) {
            *slot = None;
            matched += 1;
        }
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * matched as f64 / c.len() as f64
}

fn distinct_brute(rs: &[Vec<String>], n: usize) -> Option<f64> {
    let mut grams: Vec<Vec<String>> = Vec::new();
    for r in rs {
        for i in 0..r.len().saturating_sub(n - 1) {
            grams.push(r[i..i + n].to_vec());
        }
    }
    let total = grams.len();
    grams.sort();
    grams.dedup();
    (total > 0).then(|| grams.len() as f64 / total as f64)
}

/// Perplexity straight from the interpolation formula with counts taken by
/// scanning every sentence for every transition.
fn perplexity_brute(bg: &[Vec<String>], user: &[Vec<String>], lambda: f64, sent: &[String]) -> f64 {
    let mut vocab: Vec<String> = bg.iter().flatten().cloned().collect();
    vocab.push("</s>".into());
    vocab.push("<unk>".into());
    vocab.sort();
    vocab.dedup();
    let norm = |w: &String| if vocab.contains(w) { w.clone() } else { "<unk>".to_owned() };
    let padded = |s: &[String]| -> Vec<String> {
        let mut p = vec!["<s>".to_owned()];
        p.extend(s.iter().map(norm));
        p.push("</s>".into());
        p
    };
    let count = |corpus: &[Vec<String>], v: &str, w: Option<&str>| -> usize {
        corpus
            .iter()
            .map(|s| {
                let p = padded(s);
                p.windows(2).filter(|x| x[0] == v && w.is_none_or(|w| x[1] == w)).count()
            })
            .sum()
    };
    let target = padded(sent);
    let mut log_sum = 0.0;
    for pair in target.windows(2) {
        let (v, w) = (pair[0].as_str(), pair[1].as_str());
        let bg_p = (count(bg, v, Some(w)) + 1) as f64 / (count(bg, v, None) + vocab.len()) as f64;
        let uc = count(user, v, None);
        let p = if uc == 0 {
            bg_p
        } else {
            lambda * count(user, v, Some(w)) as f64 / uc as f64 + (1.0 - lambda) * bg_p
        };
        log_sum += p.ln();
    }
    (-log_sum / (target.len() - 1) as f64).exp()
}

fn urank_brute(mt: f64, md: &[f64], st: f64, sd: &[f64]) -> f64 {
    // position of the truth after a descending sort, ties resolved in its favour
    let pos = |t: f64, d: &[f64]| {
        let mut all: Vec<(f64, bool)> = d.iter().map(|&x| (x, false)).collect();
        all.push((t, true));
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        all.iter().position(|x| x.1).expect("truth present")
    };
    if pos(mt, md) < pos(st, sd) {
        1.0
    } else {
        0.0
    }
}

fn embedding_brute(c: &[String], r: &[String], wv: &WordVectors) -> Option<[f64; 3]> {
    let vecs = |s: &[String]| -> Vec<Vec<f64>> { s.iter().filter_map(|t| wv.get(t)).map(<[f64]>::to_vec).collect() };
    let (cv, rv) = (vecs(c), vecs(r));
    if cv.is_empty() || rv.is_empty() {
        return None;
    }
    let dim = wv.dim();
    let cos = |a: &[f64], b: &[f64]| {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..dim {
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / na.sqrt() / nb.sqrt()
        }
    };
    let avg = |vs: &[Vec<f64>]| -> Vec<f64> { (0..dim).map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / vs.len() as f64).collect() };
    let ext = |vs: &[Vec<f64>]| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                let mut best = vs[0][k];
                for v in vs {
                    if v[k].abs() > best.abs() || (v[k].abs() == best.abs() && v[k] > best) {
                        best = v[k];
                    }
                }
                best
            })
            .collect()
    };
    let greedy = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| cos(x, y)).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / a.len() as f64
    };
    Some([
        cos(&avg(&cv), &avg(&rv)),
        cos(&ext(&cv), &ext(&rv)),
        (greedy(&cv, &rv) + greedy(&rv, &cv)) / 2.0,
    ])
}

/// Largest absolute disagreement between library metric and oracle per
/// metric over `cases` random cases.
pub fn metric_oracles(seed: u64, cases: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    let mut bump = |i: usize, a: f64, b: f64| {
        let d = (a - b).abs();
        worst[i] = worst[i].max(if d.is_nan() { f64::INFINITY } else { d });
    };
    for _ in 0..cases {
        let vocab = rng.random_range(2..=20);
        let c = random_sentence(&mut rng, 0, vocab);
        let r = random_sentence(&mut rng, 1, vocab);
        bump(0, bleu1(&c, &r), bleu1_brute(&c, &r));

        let group: Vec<Vec<String>> = (0..rng.random_range(2..5)).map(|_| random_sentence(&mut rng, 0, vocab)).collect();
        for n in 1..=2 {
            match (distinct_n(&group, n), distinct_brute(&group, n)) {
                (Some(a), Some(b)) => bump(1, a, b),
                (None, None) => {}
                _ => bump(1, 0.0, f64::INFINITY),
            }
        }

        let bg: Vec<Vec<String>> = (0..rng.random_range(1..6)).map(|_| random_sentence(&mut rng, 0, vocab)).collect();
        let user: Vec<Vec<String>> = (0..rng.random_range(0..4)).map(|_| random_sentence(&mut rng, 0, vocab + 2)).collect();
        let lambda = rng.random_range(0.0..=1.0);
        let sent = random_sentence(&mut rng, 1, vocab + 2);
        let lm = BigramLM::new("u", &bg, &user, lambda);
        bump(2, lm.perplexity(&sent).expect("nonempty"), perplexity_brute(&bg, &user, lambda, &sent));

        // coarse grid so ties occur
        let mut score = || f64::from(rng.random_range(-8i32..0)) / 2.0;
        let n = 1 + (score().abs() as usize);
        let (mt, st) = (score(), score());
        let md: Vec<f64> = (0..n).map(|_| score()).collect();
        let sd: Vec<f64> = (0..n).map(|_| score()).collect();
        bump(3, urank_single(mt, &md, st, &sd), urank_brute(mt, &md, st, &sd));

        let dim = 3;
        let mut wv = WordVectors::new(dim);
        for w in 0..vocab {
            if rng.random_bool(0.8) {
                let v: Vec<f64> = (0..dim).map(|_| f64::from(rng.random_range(-4i32..=4)) / 2.0).collect();
                wv.insert(format!("t{w}"), v).expect("right dim");
            }
        }
        match (embedding_metrics(&c, &r, &wv), embedding_brute(&c, &r, &wv)) {
            (Some(e), Some(b)) => {
                bump(4, e.average, b[0]);
                bump(4, e.extrema, b[1]);
                bump(4, e.greedy, b[2]);
            }
            (None, None) => {}
            _ => bump(4, 0.0, f64::INFINITY),
        }
    }
    ["bleu1", "distinct_n", "perplexity", "urank", "embedding"]
        .into_iter()
        .zip(worst)
        .collect()
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub text: String,
    pub passed: bool,
}

pub const METRIC_TOLERANCE: f64 = 1e-9;

/// Every primitive plus the end-to-end loss at `h = 1e-4`, relative error
/// below 1e-4; KL oracle within 1%; metric oracles within 1e-9.
pub fn run(seed: u64) -> Result<SelfcheckReport, ObjectiveError> {
    let mut text = String::new();
    let mut passed = true;
    let opts = GradCheckOptions::default();
    let mut line = |name: &str, ok: bool, detail: String| {
        passed &= ok;
        writeln!(text, "{:<28} {}  {detail}", name, if ok { "ok  " } else { "FAIL" }).expect("writing to a String");
    };
    for (op, r) in primitive_suite(seed, &opts)? {
        line(&format!("grad {op}"), r.passed(), format!("max_rel={:.3e}", r.max_rel_error()));
    }
    let r = pagenerator_loss_check(seed.wrapping_add(10), &opts)?;
    line("grad pagenerator_loss", r.passed(), format!("max_rel={:.3e}", r.max_rel_error()));
    let kl = kl_oracle(seed, 20, 1_000_000);
    line(
        "kl monte_carlo",
        kl.max_rel_error < 0.01 && kl.max_self_kl < 1e-9,
        format!("max_rel={:.3e} self={:.1e}", kl.max_rel_error, kl.max_self_kl),
    );
    for (name, err) in metric_oracles(seed, 200) {
        line(&format!("oracle {name}"), err < METRIC_TOLERANCE, format!("max_abs={err:.1e}"));
    }
    Ok(SelfcheckReport { text, passed })
}
