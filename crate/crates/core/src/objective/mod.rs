//! Loss terms: reconstruction, Gaussian KL, bag-of-words, the two user
//! regularizers and KL annealing.
//!
//! The minimized loss per example is
//!
//! ```text
//! reconstruction + anneal * KL(q || p_user) + bow + r1 + r2
//! r1 = max(-gamma1, KL(q || p_user) - KL(q || p_unk))
//! r2 = max(-gamma2, mean(var_user) - mean(var_unk))
//! ```
//!
//! and a batch loss is the mean over its examples. Terms a variant does not
//! use are reported as zero.


use std::fmt;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Real};
use crate::model::{Batch, GaussNodes, GaussianParams, ModelError, Net};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite {term} ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Closed-form KL(a || b) between diagonal Gaussians.
pub fn gaussian_kl(a: &GaussianParams, b: &GaussianParams) -> Result<f64, ObjectiveError> {
    if a.dim() != b.dim() {
        return Err(ObjectiveError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut kl = 0.0;
    for i in 0..a.dim() {
        let (ma, la, mb, lb) = (a.mu[i], a.log_var[i], b.mu[i], b.log_var[i]);
        kl += lb - la + (la.exp() + (ma - mb).powi(2)) / lb.exp() - 1.0;
    }
    Ok(0.5 * kl)
}

pub fn r1(kl_user: f64, kl_unk: f64, gamma1: f64) -> f64 {
    (kl_user - kl_unk).max(-gamma1)
}

pub fn r2(var_user: &[f64], var_unk: &[f64], gamma2: f64) -> Result<f64, ObjectiveError> {
    if var_user.len() != var_unk.len() || var_user.is_empty() {
        return Err(ObjectiveError::DimensionMismatch(var_user.len(), var_unk.len()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(var_user) - mean(var_unk)).max(-gamma2))
}

/// Linear KL ramp `min(1, batch / anneal_batches)`.
pub fn anneal_weight(batch_index: usize, anneal_batches: usize) -> f64 {
    assert!(anneal_batches > 0, "anneal_batches must be positive");
    (batch_index as f64 / anneal_batches as f64).min(1.0)
}

/// Per-row KL(a || b), `[rows, 1]`.
pub fn kl_node<T: Real>(g: &mut Graph<T>, a: GaussNodes, b: GaussNodes) -> Result<NodeId, AutodiffError> {
    let dmu = g.sub(a.mu, b.mu)?;
    let dmu2 = g.mul(dmu, dmu)?;
    let var_a = g.exp(a.log_var)?;
    let num = g.add(var_a, dmu2)?;
    let neg_lb = g.scale(b.log_var, -1.0)?;
    let inv_var_b = g.exp(neg_lb)?;
    let ratio = g.mul(num, inv_var_b)?;
    let dlv = g.sub(b.log_var, a.log_var)?;
    let inner = g.add(dlv, ratio)?;
    let inner = g.add_scalar(inner, -1.0)?;
    let s = g.sum_cols(inner)?;
    g.scale(s, 0.5)
}

/// Per-row mean of `exp(a.log_var) - exp(b.log_var)`, `[rows, 1]`.
pub fn mean_variance_gap<T: Real>(g: &mut Graph<T>, a: GaussNodes, b: GaussNodes) -> Result<NodeId, AutodiffError> {
    let va = g.exp(a.log_var)?;
    let vb = g.exp(b.log_var)?;
    let d = g.sub(va, vb)?;
    let s = g.sum_cols(d)?;
    let dim = g.shape(a.log_var)[1];
    g.scale(s, 1.0 / dim as f64)
}

/// Bag-of-words loss of one reply.
pub fn bow_loss<T: Real>(
    net: &mut Net<'_, T>,
    z: NodeId,
    h_q: NodeId,
    e_u: NodeId,
    reply: &[usize],
) -> Result<NodeId, ObjectiveError> {
    if reply.is_empty() {
        return Err(ModelError::EmptyInput("reply").into());
    }
    let per_row = net.bow_nll(z, h_q, e_u, &[reply.to_vec()])?;
    Ok(net.graph.sum(per_row)?)
}

/// Batch-mean values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_user: f64,
    pub kl_unk: f64,
    pub bow: f64,
    pub r1: f64,
    pub r2: f64,
    pub anneal_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "batch,reconstruction,kl_user,kl_unk,bow,r1,r2,anneal_weight,total";

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("reconstruction", self.reconstruction),
            ("kl_user", self.kl_user),
            ("kl_unk", self.kl_unk),
            ("bow", self.bow),
            ("r1", self.r1),
            ("r2", self.r2),
            ("anneal_weight", self.anneal_weight),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<(), ObjectiveError> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, value)) => Err(ObjectiveError::NonFinite { term, value }),
            None => Ok(()),
        }
    }

    pub fn csv_row(&self, batch: usize) -> String {
        let mut row = batch.to_string();
        for (_, v) in self.terms() {
            row.push(',');
            row.push_str(&format!("{v:?}"));
        }
        row
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total {:.4} (rec {:.4}, kl {:.4}x{:.3}, bow {:.4}, r1 {:.4}, r2 {:.4})",
            self.total, self.reconstruction, self.kl_user, self.anneal_weight, self.bow, self.r1, self.r2
        )
    }
}

/// Scalar loss nodes in one training graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub kl_user: Option<NodeId>,
    pub kl_unk: Option<NodeId>,
    pub bow: Option<NodeId>,
    pub r1: Option<NodeId>,
    pub r2: Option<NodeId>,
    pub anneal_weight: f64,
}

impl LossNodes {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> Result<LossBreakdown, ObjectiveError> {
        let v = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item().f64());
        let b = LossBreakdown {
            reconstruction: v(Some(self.reconstruction)),
            kl_user: v(self.kl_user),
            kl_unk: v(self.kl_unk),
            bow: v(self.bow),
            r1: v(self.r1),
            r2: v(self.r2),
            anneal_weight: self.anneal_weight,
            total: v(Some(self.total)),
        };
        b.check_finite()?;
        Ok(b)
    }
}

/// Builds the batch loss on `net`'s graph for the variant in its config.
pub fn build_loss<T: Real>(
    net: &mut Net<'_, T>,
    batch: &Batch,
    noise: Option<&[T]>,
    anneal: f64,
) -> Result<LossNodes, ObjectiveError> {
    let cfg = net.cfg;
    let out = net.forward_train(batch, noise)?;
    let g = &mut net.graph;
    let reconstruction = g.mean(out.recon)?;
    let mut nodes = LossNodes {
        total: reconstruction,
        reconstruction,
        kl_user: None,
        kl_unk: None,
        bow: None,
        r1: None,
        r2: None,
        anneal_weight: 0.0,
    };
    let Some(lat) = out.latent else {
        return Ok(nodes);
    };
    nodes.anneal_weight = anneal;
    let kl_user_rows = kl_node(g, lat.posterior, lat.prior_user)?;
    let kl_unk_rows = kl_node(g, lat.posterior, lat.prior_unk)?;
    let kl_user = g.mean(kl_user_rows)?;
    let bow = g.mean(lat.bow)?;
    let weighted = g.scale(kl_user, anneal)?;
    let mut total = g.add(reconstruction, weighted)?;
    total = g.add(total, bow)?;
    nodes.kl_user = Some(kl_user);
    nodes.kl_unk = Some(g.mean(kl_unk_rows)?);
    nodes.bow = Some(bow);
    if cfg.r1_active() {
        let gap = g.sub(kl_user_rows, kl_unk_rows)?;
        let hinge = g.clamp_min(gap, -cfg.gamma1)?;
        let r1 = g.mean(hinge)?;
        total = g.add(total, r1)?;
        nodes.r1 = Some(r1);
    }
    if cfg.r2_active() {
        let gap = mean_variance_gap(g, lat.prior_user, lat.prior_unk)?;
        let hinge = g.clamp_min(gap, -cfg.gamma2)?;
        let r2 = g.mean(hinge)?;
        total = g.add(total, r2)?;
        nodes.r2 = Some(r2);
    }
    nodes.total = total;
    Ok(nodes)
}

/// Forward pass plus loss values; the graph stays in `net` for backward.
pub fn total_loss<T: Real>(
    net: &mut Net<'_, T>,
    batch: &Batch,
    noise: Option<&[T]>,
    anneal: f64,
) -> Result<(LossNodes, LossBreakdown), ObjectiveError> {
    let nodes = build_loss(net, batch, noise, anneal)?;
    let breakdown = nodes.breakdown(&net.graph)?;
    Ok((nodes, breakdown))
}
