use std::collections::HashMap;
use std::path::Path;

use super::MetricError;

/// Fixed-dimension word vectors from a text file whose first line is
/// `count dim` and each further line `token v1 ... vd`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, v: Vec<f64>) -> Result<(), MetricError> {
        if v.len() != self.dim {
            return Err(MetricError::Vectors(format!("vector of length {} in a {}-dim table", v.len(), self.dim)));
        }
        self.vectors.insert(token.into(), v);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| MetricError::Vectors("empty vector file".into()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| MetricError::Vectors(format!("bad header `{header}`, expected `count dim`")))?;
        let [count, dim] = head[..] else {
            return Err(MetricError::Vectors(format!("bad header `{header}`, expected `count dim`")));
        };
        let mut wv = Self::new(dim);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| MetricError::Vectors(format!("line {}: {e}", i + 1)))?;
            wv.insert(token, v)
                .map_err(|e| MetricError::Vectors(format!("line {}: {e}", i + 1)))?;
        }
        if wv.len() != count {
            return Err(MetricError::Vectors(format!("header promises {count} vectors, found {}", wv.len())));
        }
        Ok(wv)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Vectors of the in-vocabulary tokens; OOV tokens are dropped.
    pub fn lookup<'a>(&'a self, tokens: &[String]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t)).collect()
    }
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

fn mean_vector(vs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= vs.len() as f64);
    out
}

/// Per dimension, the value of largest magnitude, sign kept.
fn extrema_vector(vs: &[&[f64]]) -> Vec<f64> {
    (0..vs[0].len())
        .map(|d| {
            let max = vs.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            let min = vs.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            if max.abs() >= min.abs() {
                max
            } else {
                min
            }
        })
        .collect()
}

fn greedy_one_way(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / a.len() as f64
}

/// Average, Extrema and Greedy scores; `None` when either side has no
/// in-vocabulary token.
pub fn embedding_metrics(candidate: &[String], reference: &[String], wv: &WordVectors) -> Option<EmbeddingScores> {
    let c = wv.lookup(candidate);
    let r = wv.lookup(reference);
    if c.is_empty() || r.is_empty() {
        return None;
    }
    Some(EmbeddingScores {
        average: cosine(&mean_vector(&c), &mean_vector(&r)),
        extrema: cosine(&extrema_vector(&c), &extrema_vector(&r)),
        greedy: 0.5 * (greedy_one_way(&c, &r) + greedy_one_way(&r, &c)),
    })
}
