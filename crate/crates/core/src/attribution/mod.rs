// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution over linear computation graphs.
//!
//! The attribution score of node `v` for root `t` is `a_v · ∂a_t/∂a_v`,
//! computed over graph edges only. Summed over all leaves it reproduces the
//! root value. Hierarchical attribution thresholds nodes during the backward
//! pass, so a node cut off from the root by a pruned intermediate receives
//! nothing from it.

pub mod direct;
mod qk;
mod sweep;

use serde::{Deserialize, Serialize};

use crate::lingraph::{graph_to_json, GraphExport, LinearGraph, NodeId, NodeKind};
use crate::{Error, Result};

pub use direct::{direct_contribution, Contributions, FrozenAffine};
pub use qk::{
    qk_attribute, qk_attribute_recursive, FeaturePairContribution, PairSide, QkAttribution, QkContext, QkTree,
    QK_TOL,
};
pub use sweep::{default_grid, sparsity_sweep, sparsity_sweep_with, Comparison, SweepPoint, ThresholdSweep};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Standard,
    Hierarchical,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Method::Standard),
            "hierarchical" => Ok(Method::Hierarchical),
            _ => Err(Error::InvalidInput(format!("unknown attribution method {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub tau: f64,
    /// Remove error leaves before attributing.
    pub detach_errors: bool,
    /// Remove bias leaves before attributing.
    pub detach_biases: bool,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            tau: 0.0,
            detach_errors: true,
            detach_biases: false,
        }
    }
}

impl AttributionOptions {
    /// Keeps every leaf.
    pub fn full(tau: f64) -> Self {
        AttributionOptions {
            tau,
            detach_errors: false,
            detach_biases: false,
        }
    }

    fn excluded(&self, graph: &LinearGraph) -> Vec<bool> {
        graph
            .nodes
            .iter()
            .map(|n| {
                n.detached
                    || (self.detach_errors && n.id.kind == NodeKind::Error)
                    || (self.detach_biases && n.id.kind == NodeKind::Bias)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: Method,
    pub options: AttributionOptions,
    pub root: usize,
    pub root_activation: f64,
    /// `a_v · ∂a_t/∂a_v` per node. For standard attribution these are the
    /// full-graph scores; for hierarchical attribution, detached nodes hold 0.
    pub scores: Vec<f64>,
    pub surviving: Vec<bool>,
    /// Scores of surviving leaves within the surviving subgraph.
    pub leaf_scores: Vec<(usize, f64)>,
    pub leaf_sum: f64,
}

impl AttributionResult {
    pub fn surviving_count(&self) -> usize {
        self.surviving.iter().filter(|&&s| s).count()
    }

    /// Surviving nodes sorted by descending score magnitude.
    pub fn ranked(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.scores.len()).filter(|&i| self.surviving[i]).collect();
        v.sort_by(|&a, &b| self.scores[b].abs().total_cmp(&self.scores[a].abs()));
        v
    }

    /// The graph export with per-node `attr` and `surviving` filled in.
    pub fn export(&self, graph: &LinearGraph) -> GraphExport {
        let mut e = graph_to_json(graph);
        for (n, (&a, &s)) in e.nodes.iter_mut().zip(self.scores.iter().zip(&self.surviving)) {
            n.attr = Some(a);
            n.surviving = Some(s);
        }
        e
    }
}

/// Reverse-topological gradient pass. `excluded` nodes get no gradient.
/// With `tau`, a non-root node whose `|grad·a|` falls below it is zeroed
/// before propagating. Returns `(grad, detached_by_threshold)`.
fn backward(graph: &LinearGraph, excluded: &[bool], tau: Option<f64>) -> (Vec<f64>, Vec<bool>) {
    let n = graph.len();
    let mut grad = vec![0.0f64; n];
    let mut cut = vec![false; n];
    grad[graph.root] = 1.0;
    for v in (0..n).rev() {
        if excluded[v] && v != graph.root {
            grad[v] = 0.0;
            continue;
        }
        let g = grad[v];
        if g == 0.0 {
            continue;
        }
        if let Some(tau) = tau {
            if v != graph.root && (g * graph.nodes[v].activation).abs() < tau {
                grad[v] = 0.0;
                cut[v] = true;
                continue;
            }
        }
        for e in graph.in_edges(v) {
            grad[e.src as usize] += g * e.weight;
        }
    }
    (grad, cut)
}

fn scores_of(graph: &LinearGraph, grad: &[f64]) -> Vec<f64> {
    grad.iter().zip(&graph.nodes).map(|(g, n)| g * n.activation).collect()
}

fn leaf_scores(graph: &LinearGraph, scores: &[f64], surviving: &[bool]) -> (Vec<(usize, f64)>, f64) {
    let leaves: Vec<(usize, f64)> = (0..graph.len())
        .filter(|&v| surviving[v] && graph.is_leaf(v))
        .map(|v| (v, scores[v]))
        .collect();
    let sum = leaves.iter().map(|(_, s)| s).sum();
    (leaves, sum)
}

/// `a_v · ∂a_t/∂a_v` over the full graph. `t` must be the graph's root.
pub fn attribution_score(graph: &LinearGraph, v: &NodeId, t: &NodeId) -> Result<f64> {
    let ti = graph.require(t)?;
    if ti != graph.root {
        return Err(Error::InvalidInput(format!("{t} is not the graph root")));
    }
    let vi = graph.require(v)?;
    let (grad, _) = backward(graph, &vec![false; graph.len()], None);
    Ok(grad[vi] * graph.nodes[vi].activation)
}

/// Scores for every node in one full backward pass.
pub fn all_scores(graph: &LinearGraph) -> Vec<f64> {
    let (grad, _) = backward(graph, &vec![false; graph.len()], None);
    scores_of(graph, &grad)
}

/// One backward pass over the whole graph, then every node scoring below
/// `tau` in magnitude is detached. Leaf scores are recomputed on what is
/// left.
pub fn standard_attribute(graph: &LinearGraph, opts: &AttributionOptions) -> AttributionResult {
    let excluded = opts.excluded(graph);
    let (grad, _) = backward(graph, &excluded, None);
    let scores = scores_of(graph, &grad);
    let surviving: Vec<bool> = (0..graph.len())
        .map(|v| v == graph.root || (grad[v] != 0.0 && scores[v].abs() >= opts.tau))
        .collect();
    let dropped: Vec<bool> = surviving.iter().zip(&excluded).map(|(&s, &x)| !s || x).collect();
    let (sub_grad, _) = backward(graph, &dropped, None);
    let sub_scores = scores_of(graph, &sub_grad);
    let (leaf_scores, leaf_sum) = leaf_scores(graph, &sub_scores, &surviving);
    AttributionResult {
        method: Method::Standard,
        options: *opts,
        root: graph.root,
        root_activation: graph.nodes[graph.root].activation,
        scores,
        surviving,
        leaf_scores,
        leaf_sum,
    }
}

/// Backward pass in reverse topological order that zeroes a node's
/// gradient as soon as its score falls below `tau` in magnitude, before it
/// propagates to predecessors.
pub fn hierarchical_attribute(graph: &LinearGraph, opts: &AttributionOptions) -> AttributionResult {
    let excluded = opts.excluded(graph);
    let (grad, _) = backward(graph, &excluded, Some(opts.tau));
    let scores = scores_of(graph, &grad);
    let surviving: Vec<bool> = (0..graph.len()).map(|v| v == graph.root || grad[v] != 0.0).collect();
    let (leaf_scores, leaf_sum) = leaf_scores(graph, &scores, &surviving);
    AttributionResult {
        method: Method::Hierarchical,
        options: *opts,
        root: graph.root,
        root_activation: graph.nodes[graph.root].activation,
        scores,
        surviving,
        leaf_scores,
        leaf_sum,
    }
}

pub fn attribute(graph: &LinearGraph, method: Method, opts: &AttributionOptions) -> AttributionResult {
    match method {
        Method::Standard => standard_attribute(graph, opts),
        Method::Hierarchical => hierarchical_attribute(graph, opts),
    }
}

/// Fraction of the root value accounted for by the surviving leaves.
pub fn leaf_sum_evaluate(result: &AttributionResult) -> Result<f64> {
    if result.root_activation == 0.0 {
        return Err(Error::ZeroRoot);
    }
    Ok(result.leaf_sum / result.root_activation)
}
