// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checks that a graph reproduces its forward pass.

use serde::Serialize;

use super::{LinearGraph, NodeId, RootSpec};
use crate::toymodel::ActivationCache;

/// Absolute tolerance for feature nodes.
pub const NODE_TOL: f64 = 1e-4;
/// Absolute tolerance for the root.
pub const ROOT_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offender {
    pub node: NodeId,
    pub expected: f64,
    pub got: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checked: usize,
    /// Every node outside tolerance, in topological order.
    pub failures: Vec<NodeId>,
    /// The largest errors, worst first.
    pub worst: Vec<Offender>,
    pub max_node_error: f64,
    pub root_error: f64,
}

const WORST_KEPT: usize = 10;

/// Recomputes every non-leaf node from its in-edges: feature nodes must
/// match `ReLU(Σ k·a)` within [`NODE_TOL`], the root must match the cached
/// logit (or feature value) within [`ROOT_TOL`].
pub fn verify_graph(graph: &LinearGraph, cache: &ActivationCache) -> VerifyReport {
    let mut offenders = Vec::new();
    let mut failures = Vec::new();
    let mut max_node_error = 0.0f64;
    let mut root_error = 0.0;
    let mut checked = 0;
    for v in 0..graph.len() {
        if graph.is_leaf(v) {
            continue;
        }
        checked += 1;
        let pre = graph.pre_activation(v);
        let node = graph.nodes[v].id;
        let (expected, got, tol) = if v == graph.root {
            let expected = match graph.root_spec {
                RootSpec::Logit { pos, token } => {
                    let vsz = cache.logits.shape()[1];
                    cache.logits.data()[pos * vsz + token] as f64
                }
                RootSpec::Feature { .. } => graph.frozen.root_reference,
            };
            (expected, pre, ROOT_TOL)
        } else {
            (graph.nodes[v].activation, pre.max(0.0), NODE_TOL)
        };
        let error = (got - expected).abs();
        if v == graph.root {
            root_error = error;
        } else {
            max_node_error = max_node_error.max(error);
        }
        if error > tol || !error.is_finite() {
            failures.push(node);
        }
        offenders.push(Offender {
            node,
            expected,
            got,
            error,
        });
    }
    offenders.sort_by(|a, b| b.error.total_cmp(&a.error));
    offenders.truncate(WORST_KEPT);
    VerifyReport {
        passed: failures.is_empty(),
        checked,
        failures,
        worst: offenders,
        max_node_error,
        root_error,
    }
}
