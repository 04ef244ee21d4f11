use std::fmt;

use super::graph::{Graph, NodeId};
use super::AutodiffError;

/// Denominator floor for relative error, so gradients near zero are compared
/// on an absolute scale instead of amplifying finite-difference noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Upper bound on checked elements per leaf; `None` checks every element.
    pub max_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            max_per_leaf: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub leaves: Vec<LeafCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&LeafCheck> {
        self.leaves.iter().filter(|l| l.max_rel_error >= self.tol).collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.leaves {
            writeln!(
                f,
                "{:<24} {:>6} checked  max_rel={:.3e}  {}",
                l.name,
                l.checked,
                l.max_rel_error,
                if l.max_rel_error < self.tol { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares backward() gradients of every trainable leaf against central
/// differences obtained by replaying the graph with perturbed leaf values.
pub fn grad_check(
    graph: &mut Graph<f64>,
    root: NodeId,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError> {
    assert!(opts.h > 0.0, "finite-difference step must be positive");
    graph.forward(root)?;
    let grads = graph.backward(root)?;
    let mut leaves = Vec::new();

    for (id, name) in graph.trainable_leaves() {
        let name = name.unwrap_or_else(|| format!("leaf#{}", id.index()));
        let n = graph.value(id).len();
        let analytic = grads
            .get(id)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; n]);
        let indices = choose_indices(&analytic, opts.max_per_leaf);
        let original = graph.value(id).data().to_vec();
        let mut perturbed = original.clone();
        let mut check = LeafCheck {
            name,
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            perturbed[i] = original[i] + opts.h;
            graph.set_leaf(id, &perturbed);
            let plus = graph.forward(root)?.item();
            perturbed[i] = original[i] - opts.h;
            graph.set_leaf(id, &perturbed);
            let minus = graph.forward(root)?.item();
            perturbed[i] = original[i];

            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic[i], numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        graph.set_leaf(id, &original);
        leaves.push(check);
    }
    graph.forward(root)?;
    Ok(GradCheckReport { tol: opts.tol, leaves })
}

/// Half the budget goes to the largest-magnitude gradients, the rest is
/// spread evenly over the leaf.
fn choose_indices(analytic: &[f64], max: Option<usize>) -> Vec<usize> {
    let n = analytic.len();
    let Some(max) = max.filter(|&m| m < n) else {
        return (0..n).collect();
    };
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = by_mag.into_iter().take(max / 2).collect();
    let rest = max - picked.len();
    for k in 0..rest {
        let i = k * n / rest;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Names of every differentiable primitive covered by [`primitive_suite`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "slice_cols",
    "sum",
    "mean",
    "sum_cols",
    "repeat_cols",
    "gather",
    "pick",
    "clamp_min",
];

/// Builds a small random graph exercising one primitive, reduced to a scalar
/// through a random weighting so every output element matters.
pub fn primitive_graph(op: &str, seed: u64) -> Result<(Graph<f64>, NodeId), AutodiffError> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rng.random_range(1..4usize), rng.random_range(2..5usize));
    let mut rand_t = |shape: Vec<usize>, lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data)
    };
    let mut g = Graph::new();
    let a = g.named_leaf("a", rand_t(vec![rows, cols], -1.5, 1.5).with_grad());
    let out = match op {
        "matmul" => {
            let b = g.named_leaf("b", rand_t(vec![cols, 3], -1.5, 1.5).with_grad());
            g.matmul(a, b)?
        }
        "add" | "sub" | "mul" => {
            let b = g.named_leaf("b", rand_t(vec![rows, cols], -1.5, 1.5).with_grad());
            match op {
                "add" => g.add(a, b)?,
                "sub" => g.sub(a, b)?,
                _ => g.mul(a, b)?,
            }
        }
        "add_row" => {
            let b = g.named_leaf("bias", rand_t(vec![cols], -1.5, 1.5).with_grad());
            g.add_row(a, b)?
        }
        "scale" => g.scale(a, -1.7)?,
        "add_scalar" => g.add_scalar(a, 0.3)?,
        "sigmoid" => g.sigmoid(a)?,
        "tanh" => g.tanh(a)?,
        "exp" => g.exp(a)?,
        "log" => {
            let p = g.named_leaf("p", rand_t(vec![rows, cols], 0.2, 2.0).with_grad());
            g.log(p)?
        }
        "softmax" => g.softmax(a)?,
        "log_softmax" => g.log_softmax(a)?,
        "concat" => {
            let b = g.named_leaf("b", rand_t(vec![rows, 2], -1.5, 1.5).with_grad());
            g.concat(&[a, b, a])?
        }
        "slice_cols" => g.slice_cols(a, 1, cols)?,
        "sum" => g.sum(a)?,
        "mean" => g.mean(a)?,
        "sum_cols" => g.sum_cols(a)?,
        "repeat_cols" => {
            let c = g.sum_cols(a)?;
            g.repeat_cols(c, 3)?
        }
        "gather" => {
            let idx: Vec<usize> = (0..4).map(|k| (k * 7 + seed as usize) % rows).collect();
            g.gather(a, &idx)?
        }
        "pick" => {
            let idx: Vec<usize> = (0..rows).map(|r| (r + seed as usize) % cols).collect();
            g.pick(a, &idx)?
        }
        "clamp_min" => {
            // keep every input at least 0.1 away from the kink
            let data: Vec<f64> = g
                .value(a)
                .data()
                .iter()
                .map(|&v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
                .collect();
            let x = g.named_leaf("x", Tensor::new(vec![rows, cols], data).with_grad());
            g.clamp_min(x, 0.0)?
        }
        other => panic!("unknown primitive {other}"),
    };
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_t(shape, -1.0, 1.0));
    let weighted = g.mul(out, w)?;
    let root = g.sum(weighted)?;
    Ok((g, root))
}

/// Gradient-checks every primitive on a graph derived from `seed`.
pub fn primitive_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>, AutodiffError> {
    PRIMITIVES
        .iter()
        .map(|&op| {
            let (mut g, root) = primitive_graph(op, seed)?;
            Ok((op, grad_check(&mut g, root, opts)?))
        })
        .collect()
}
