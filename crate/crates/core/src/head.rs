//! Multi-instance head: shared per-patch logistic regression, the ranking
//! layer and the three bag-level objectives.
//!
//! Patch probabilities are `r = sigmoid(a . F[:, i, j] + b)` for every
//! position of the feature map `F`, flattened row-major and clamped to
//! `[PROB_EPSILON, 1 - PROB_EPSILON]` so every log below is finite. The
//! ranking layer sorts them in descending order; the bag probability is the
//! first ranked value.
//!
//! All losses take a batch of `(ranked probabilities, label)` pairs, average
//! the per-bag data terms over the batch and add `lambda / 2 * ||theta||^2`
//! once, where `theta` is every `*.weight` tensor.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::backbone::{BoundParams, HEAD_BIAS, HEAD_WEIGHT};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Real;

/// Clamp applied to patch probabilities before any log.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossScheme {
    MaxPool,
    LabelAssign,
    Sparse,
}

impl LossScheme {
    pub const ALL: [LossScheme; 3] = [LossScheme::MaxPool, LossScheme::LabelAssign, LossScheme::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            LossScheme::MaxPool => "maxpool",
            LossScheme::LabelAssign => "labelassign",
            LossScheme::Sparse => "sparse",
        }
    }

    /// Default `(lambda, mu)` for the scheme.
    pub fn default_regularization(self) -> (f64, f64) {
        match self {
            LossScheme::MaxPool | LossScheme::LabelAssign => (1e-5, 0.0),
            LossScheme::Sparse => (5e-6, 1e-5),
        }
    }
}

impl fmt::Display for LossScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossScheme::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| {
            Error::invalid(
                "loss",
                format!("unknown loss `{s}` (valid options: maxpool, labelassign, sparse)"),
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MilHyperparams {
    /// L2 weight on all `*.weight` tensors.
    pub lambda: f64,
    /// L1 weight on patch probabilities (sparse scheme only).
    pub mu: f64,
    /// Number of top-ranked patches that inherit the bag label.
    pub k: usize,
    pub epsilon: f64,
}

impl MilHyperparams {
    pub fn for_scheme(scheme: LossScheme, num_patches: usize) -> Self {
        let (lambda, mu) = scheme.default_regularization();
        Self {
            lambda,
            mu,
            k: default_k(num_patches),
            epsilon: PROB_EPSILON,
        }
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(
                "hyperparams",
                format!("lambda must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::invalid(
                "hyperparams",
                format!("mu must be >= 0, got {}", self.mu),
            ));
        }
        if self.k == 0 || self.k > num_patches {
            return Err(Error::invalid(
                "hyperparams",
                format!("k must be in 1..={num_patches}, got {}", self.k),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid(
                "hyperparams",
                format!("epsilon must be in (0, 0.5), got {}", self.epsilon),
            ));
        }
        Ok(())
    }
}

/// Default number of label-carrying patches: 2% of the grid, at least one.
pub fn default_k(num_patches: usize) -> usize {
    (libm::round(0.02 * num_patches as f64) as usize).max(1)
}

/// Patch probabilities from the feature map `features` (`[N_c, H', W']`),
/// as a rank-1 node of length `H' * W'`.
pub fn instance_probs<T: Real>(
    graph: &mut Graph<T>,
    features: NodeId,
    weight: NodeId,
    bias: NodeId,
    epsilon: f64,
) -> Result<NodeId> {
    let fdims = graph.value(features).dims().to_vec();
    if fdims.len() != 3 {
        return Err(Error::shape(
            "instance_probs",
            format!("feature map must be [N_c, H, W], got {fdims:?}"),
        ));
    }
    let wdims = graph.value(weight).dims();
    if wdims != [fdims[0]] {
        return Err(Error::shape(
            "instance_probs",
            format!(
                "head weight has shape {wdims:?} but the feature map has {} channels",
                fdims[0]
            ),
        ));
    }
    if graph.value(bias).dims() != [1] {
        return Err(Error::shape(
            "instance_probs",
            format!("head bias must be [1], got {:?}", graph.value(bias).dims()),
        ));
    }
    // shared logistic regression == 1x1 convolution with one output channel
    let kernel = graph.reshape(weight, &[1, fdims[0], 1, 1])?;
    let logits = graph.conv2d(features, kernel, bias, 1, 0)?;
    let flat = graph.reshape(logits, &[fdims[1] * fdims[2]])?;
    let probs = graph.sigmoid(flat)?;
    let eps = T::from_f64(epsilon);
    graph.clamp(probs, eps, T::ONE - eps)
}

/// [`instance_probs`] using the head tensors of `params`.
pub fn instance_probs_bound<T: Real>(
    graph: &mut Graph<T>,
    features: NodeId,
    params: &BoundParams,
    epsilon: f64,
) -> Result<NodeId> {
    let w = params.get(HEAD_WEIGHT)?;
    let b = params.get(HEAD_BIAS)?;
    instance_probs(graph, features, w, b, epsilon)
}

/// Ranking layer: descending sort of the patch probabilities.
pub fn rank<T: Real>(graph: &mut Graph<T>, probs: NodeId) -> Result<NodeId> {
    graph.sort_desc(probs)
}

/// One bag in a loss batch: its ranked probabilities and its label.
#[derive(Debug, Clone, Copy)]
pub struct Bag {
    pub ranked: NodeId,
    pub label: bool,
}

/// `-log(p)` for a positive target, `-log(1 - p)` for a negative one,
/// summed over the elements of `p`.
fn cross_entropy_sum<T: Real>(graph: &mut Graph<T>, p: NodeId, positive: bool) -> Result<NodeId> {
    let q = if positive { p } else { graph.one_minus(p)? };
    let logq = graph.log(q)?;
    let s = graph.sum(logq)?;
    graph.neg(s)
}

/// Per-bag max-pooling data term: cross entropy of the top-ranked patch.
pub fn max_pooling_term<T: Real>(graph: &mut Graph<T>, bag: Bag) -> Result<NodeId> {
    let top = graph.gather(bag.ranked, &[0])?;
    cross_entropy_sum(graph, top, bag.label)
}

/// Per-bag label-assignment data term: the top `k` patches carry the bag
/// label, the remaining `m - k` are negatives; averaged over `m`.
pub fn label_assignment_term<T: Real>(graph: &mut Graph<T>, bag: Bag, k: usize) -> Result<NodeId> {
    let m = graph.value(bag.ranked).len();
    if k == 0 || k > m {
        return Err(Error::invalid(
            "loss_label_assignment",
            format!("k must be in 1..={m}, got {k}"),
        ));
    }
    let top = graph.slice(bag.ranked, 0, k)?;
    let mut total = cross_entropy_sum(graph, top, bag.label)?;
    if k < m {
        let rest = graph.slice(bag.ranked, k, m)?;
        let rest_term = cross_entropy_sum(graph, rest, false)?;
        total = graph.add(total, rest_term)?;
    }
    graph.scale(total, T::from_f64(1.0 / m as f64))
}

/// Per-bag sparse data term: max-pooling term plus `mu * ||r'||_1`.
pub fn sparse_term<T: Real>(graph: &mut Graph<T>, bag: Bag, mu: f64) -> Result<NodeId> {
    let data = max_pooling_term(graph, bag)?;
    let l1 = graph.l1_norm(bag.ranked)?;
    let penalty = graph.scale(l1, T::from_f64(mu))?;
    graph.add(data, penalty)
}

/// Per-bag data term of `scheme`.
pub fn bag_term<T: Real>(graph: &mut Graph<T>, scheme: LossScheme, bag: Bag, hp: &MilHyperparams) -> Result<NodeId> {
    match scheme {
        LossScheme::MaxPool => max_pooling_term(graph, bag),
        LossScheme::LabelAssign => label_assignment_term(graph, bag, hp.k),
        LossScheme::Sparse => sparse_term(graph, bag, hp.mu),
    }
}

/// `lambda / 2 * ||theta||^2`, or `None` when `lambda` is zero or there is
/// nothing to regularise.
pub fn l2_penalty<T: Real>(graph: &mut Graph<T>, regularized: &[NodeId], lambda: f64) -> Result<Option<NodeId>> {
    if lambda == 0.0 || regularized.is_empty() {
        return Ok(None);
    }
    let sq = graph.l2_norm_sq(regularized)?;
    graph.scale(sq, T::from_f64(lambda / 2.0)).map(Some)
}

/// Batch loss of `scheme`: mean data term plus the L2 penalty.
pub fn batch_loss<T: Real>(
    graph: &mut Graph<T>,
    scheme: LossScheme,
    bags: &[Bag],
    regularized: &[NodeId],
    hp: &MilHyperparams,
) -> Result<NodeId> {
    if bags.is_empty() {
        return Err(Error::invalid(scheme.name(), "empty batch"));
    }
    let mut total: Option<NodeId> = None;
    for &bag in bags {
        let term = bag_term(graph, scheme, bag, hp)?;
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    let total = total.expect("batch is non-empty");
    let mean = graph.scale(total, T::from_f64(1.0 / bags.len() as f64))?;
    match l2_penalty(graph, regularized, hp.lambda)? {
        Some(reg) => graph.add(mean, reg),
        None => Ok(mean),
    }
}

pub fn loss_max_pooling<T: Real>(
    graph: &mut Graph<T>,
    bags: &[Bag],
    regularized: &[NodeId],
    hp: &MilHyperparams,
) -> Result<NodeId> {
    batch_loss(graph, LossScheme::MaxPool, bags, regularized, hp)
}

pub fn loss_label_assignment<T: Real>(
    graph: &mut Graph<T>,
    bags: &[Bag],
    regularized: &[NodeId],
    hp: &MilHyperparams,
) -> Result<NodeId> {
    batch_loss(graph, LossScheme::LabelAssign, bags, regularized, hp)
}

pub fn loss_sparse<T: Real>(
    graph: &mut Graph<T>,
    bags: &[Bag],
    regularized: &[NodeId],
    hp: &MilHyperparams,
) -> Result<NodeId> {
    batch_loss(graph, LossScheme::Sparse, bags, regularized, hp)
}

/// Convenience for tests and evaluation: ranks raw probability vectors and
/// evaluates the batch loss with no regularised parameters.
pub fn loss_from_probabilities(scheme: LossScheme, batch: &[(Vec<f64>, bool)], hp: &MilHyperparams) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let mut bags = Vec::with_capacity(batch.len());
    for (r, label) in batch {
        let node = g.input(crate::tensor::Tensor::vector(r)?);
        let eps = hp.epsilon;
        let clamped = g.clamp(node, eps, 1.0 - eps)?;
        let ranked = rank(&mut g, clamped)?;
        bags.push(Bag { ranked, label: *label });
    }
    let loss = batch_loss(&mut g, scheme, &bags, &[], hp)?;
    Ok(g.value(loss).data()[0])
}
