//! Python bindings: corpus generation, training, generation, the metric
//! functions and the CLI entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use pagen_core::cli::{self, pipeline};
use pagen_core::corpus::{self, DialogueTriple, UserTable, Vocabulary};
use pagen_core::generation::{generate, GenRequest, ZMode};
use pagen_core::metrics;
use pagen_core::model::{GaussianParams, Model as CoreModel};
use pagen_core::objective;
use pagen_core::trainer::{save_tables, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Triple = (String, String, String);

fn to_core(triples: &[Triple]) -> Vec<DialogueTriple> {
    triples.iter().map(|(u, q, r)| DialogueTriple::new(u.as_str(), q, r)).collect()
}

fn split(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

/// A trained model together with its vocabulary and user table.
#[pyclass]
pub struct Model {
    inner: CoreModel<f32>,
    vocab: Vocabulary,
    users: UserTable,
}

#[pymethods]
impl Model {
    /// Loads `model.ckpt` from a `train` output directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, vocab, users) = cli::load_run_model(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner, vocab, users })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// User ids in table order; index 0 is the unknown user.
    fn users(&self) -> Vec<String> {
        (0..self.users.len()).map(|i| self.users.id(i).to_owned()).collect()
    }

    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (query, user, beam = 10, max_len = pagen_core::generation::DEFAULT_MAX_LEN, z_mode = "sample", seed = 0, n = 1))]
    fn generate(&self, query: &str, user: &str, beam: usize, max_len: usize, z_mode: &str, seed: u64, n: usize) -> PyResult<Vec<(f64, String)>> {
        let z_mode: ZMode = z_mode.parse().map_err(value_err)?;
        let req = GenRequest {
            beam,
            max_len,
            z_mode,
            seed,
            ..GenRequest::new(self.vocab.encode(&split(query)), self.users.index_of(user))
        };
        let hyps = generate(&self.inner, &req).map_err(value_err)?;
        Ok(hyps
            .iter()
            .take(n.max(1))
            .map(|h| (h.score(true), self.vocab.decode(h.reply()).join(" ")))
            .collect())
    }
}

/// Synthetic persona corpus as `(user, query, reply)` tuples.
#[pyfunction]
#[pyo3(signature = (users = 8, per_user = 400, strength = 0.9, seed = 0))]
fn gen_corpus(users: usize, per_user: usize, strength: f64, seed: u64) -> Vec<Triple> {
    corpus::generate_synthetic(users, per_user, strength, seed)
        .triples
        .into_iter()
        .map(|t| (t.user_id, t.query.join(" "), t.reply.join(" ")))
        .collect()
}

/// Trains on `triples` with a config in `key=value` form. With `out`, the
/// run directory is written like the `train` command does.
#[pyfunction]
#[pyo3(signature = (config, triples, seed = 0, train_ratio = 0.95, out = None))]
fn train(py: Python<'_>, config: &str, triples: Vec<Triple>, seed: u64, train_ratio: f64, out: Option<PathBuf>) -> PyResult<Model> {
    let cfg = TrainConfig::from_text(config).map_err(value_err)?;
    let data = pipeline::Dataset::prepare(&to_core(&triples), train_ratio, seed, cfg.min_user_utterances);
    let inner = py
        .detach(|| pipeline::train_model(&cfg, &data, seed, out.as_deref()))
        .map_err(value_err)?;
    if let Some(dir) = &out {
        save_tables(dir, &data.vocab, &data.users).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    Ok(Model {
        inner,
        vocab: data.vocab,
        users: data.users,
    })
}

/// Runs the command line tool; returns `(exit_code, stdout)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String) {
    let argv: Vec<String> = std::iter::once("pagen".to_owned()).chain(args).collect();
    let mut out = Vec::new();
    let code = py.detach(|| cli::run(&argv, &mut out));
    (code, String::from_utf8_lossy(&out).into_owned())
}

#[pyfunction]
fn bleu1(candidate: &str, reference: &str) -> PyResult<f64> {
    let r = split(reference);
    if r.is_empty() {
        return Err(value_err("reference is empty"));
    }
    Ok(metrics::bleu1(&split(candidate), &r))
}

#[pyfunction]
fn distinct_n(responses: Vec<String>, n: usize) -> PyResult<Option<f64>> {
    if n == 0 {
        return Err(value_err("n must be positive"));
    }
    let toks: Vec<Vec<String>> = responses.iter().map(|s| split(s)).collect();
    Ok(metrics::distinct_n(&toks, n))
}

#[pyfunction]
fn urank_single(m_truth: f64, m_distractors: Vec<f64>, s_truth: f64, s_distractors: Vec<f64>) -> f64 {
    metrics::urank_single(m_truth, &m_distractors, s_truth, &s_distractors)
}

/// `(average, extrema, greedy)` or `None` when a side has no known word.
#[pyfunction]
fn embedding_scores(candidate: &str, reference: &str, vectors: Vec<(String, Vec<f64>)>) -> PyResult<Option<(f64, f64, f64)>> {
    let dim = vectors.first().map_or(0, |(_, v)| v.len());
    let mut wv = metrics::WordVectors::new(dim);
    for (w, v) in vectors {
        wv.insert(w, v).map_err(value_err)?;
    }
    Ok(metrics::embedding_metrics(&split(candidate), &split(reference), &wv).map(|e| (e.average, e.extrema, e.greedy)))
}

#[pyclass]
pub struct BigramLM {
    inner: metrics::BigramLM,
}

#[pymethods]
impl BigramLM {
    #[new]
    #[pyo3(signature = (background, user, lam = metrics::DEFAULT_LAMBDA))]
    fn new(background: Vec<String>, user: Vec<String>, lam: f64) -> PyResult<Self> {
        if !(0.0..=1.0).contains(&lam) {
            return Err(value_err("lambda must lie in [0, 1]"));
        }
        let bg: Vec<Vec<String>> = background.iter().map(|s| split(s)).collect();
        let us: Vec<Vec<String>> = user.iter().map(|s| split(s)).collect();
        Ok(Self {
            inner: metrics::BigramLM::new("user", &bg, &us, lam),
        })
    }

    fn prob(&self, prev: &str, word: &str) -> f64 {
        self.inner.prob(prev, word)
    }

    fn perplexity(&self, sentence: &str) -> Option<f64> {
        self.inner.perplexity(&split(sentence))
    }
}

fn gauss(mu: Vec<f64>, log_var: Vec<f64>) -> GaussianParams {
    GaussianParams { mu, log_var }
}

/// KL(a || b) for diagonal Gaussians given as means and log-variances.
#[pyfunction]
fn gaussian_kl(mu_a: Vec<f64>, log_var_a: Vec<f64>, mu_b: Vec<f64>, log_var_b: Vec<f64>) -> PyResult<f64> {
    objective::gaussian_kl(&gauss(mu_a, log_var_a), &gauss(mu_b, log_var_b)).map_err(value_err)
}

#[pyfunction]
fn r1(kl_user: f64, kl_unk: f64, gamma1: f64) -> f64 {
    objective::r1(kl_user, kl_unk, gamma1)
}

#[pyfunction]
fn r2(var_user: Vec<f64>, var_unk: Vec<f64>, gamma2: f64) -> PyResult<f64> {
    objective::r2(&var_user, &var_unk, gamma2).map_err(value_err)
}

/// Gradient, KL and metric oracle checks; returns `(passed, text)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selfcheck(py: Python<'_>, seed: u64) -> PyResult<(bool, String)> {
    let r = py.detach(|| cli::selfcheck::run(seed)).map_err(value_err)?;
    Ok((r.passed, r.text))
}

#[pymodule]
fn pagen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<BigramLM>()?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(bleu1, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(urank_single, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_scores, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(r1, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
