// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON and Graphviz export.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Channel, Edge, FeatureNode, FrozenContext, GraphSite, LinearGraph, NodeKind, RootSpec};
use crate::dictionary::HookSpec;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeExport {
    pub id: usize,
    pub label: String,
    pub kind: NodeKind,
    pub layer: usize,
    pub site: GraphSite,
    pub feature: Option<usize>,
    pub pos: usize,
    pub activation: f64,
    pub detached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surviving: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub kernel: f64,
    pub channel: Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternExport {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenExport {
    pub ln1_rstd: Vec<Vec<f32>>,
    pub lnf_rstd: Vec<f32>,
    pub patterns: Vec<PatternExport>,
    pub input_scales: Vec<(HookSpec, Vec<f32>)>,
    pub root_reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub schema_version: u32,
    pub tokens: Vec<usize>,
    pub root_spec: RootSpec,
    pub n_layers: usize,
    pub frozen: FrozenExport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<NodeExport>,
    pub edges: Vec<EdgeExport>,
    pub root: usize,
    pub meta: GraphMeta,
}

pub fn graph_to_json(graph: &LinearGraph) -> GraphExport {
    let nodes = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| NodeExport {
            id: i,
            label: n.id.to_string(),
            kind: n.id.kind,
            layer: n.id.layer,
            site: n.id.site,
            feature: n.id.feature,
            pos: n.id.pos,
            activation: n.activation,
            detached: n.detached,
            attr: None,
            surviving: None,
        })
        .collect();
    let edges = graph
        .edges
        .iter()
        .map(|e| EdgeExport {
            src: e.src as usize,
            dst: e.dst as usize,
            weight: e.weight,
            kernel: e.kernel,
            channel: e.channel,
        })
        .collect();
    let f = &graph.frozen;
    GraphExport {
        nodes,
        edges,
        root: graph.root,
        meta: GraphMeta {
            schema_version: GRAPH_SCHEMA_VERSION,
            tokens: graph.tokens.clone(),
            root_spec: graph.root_spec,
            n_layers: graph.n_layers,
            frozen: FrozenExport {
                ln1_rstd: f.ln1_rstd.clone(),
                lnf_rstd: f.lnf_rstd.clone(),
                patterns: f
                    .patterns
                    .iter()
                    .map(|p| PatternExport {
                        shape: p.shape().to_vec(),
                        data: p.data().to_vec(),
                    })
                    .collect(),
                input_scales: f.input_scales.clone(),
                root_reference: f.root_reference,
            },
        },
    }
}

/// Rebuilds a graph from its export. Edges must be grouped by target in
/// node order, as [`graph_to_json`] writes them.
pub fn graph_from_json(export: &GraphExport) -> Result<LinearGraph> {
    let meta = &export.meta;
    if meta.schema_version != GRAPH_SCHEMA_VERSION {
        return Err(Error::Format(format!("graph schema version {}", meta.schema_version)));
    }
    let n = export.nodes.len();
    if n == 0 || export.root != n - 1 {
        return Err(Error::Format("the root must be the last node".into()));
    }
    let nodes: Vec<FeatureNode> = export
        .nodes
        .iter()
        .map(|e| FeatureNode {
            id: super::NodeId {
                kind: e.kind,
                layer: e.layer,
                site: e.site,
                feature: e.feature,
                pos: e.pos,
            },
            activation: e.activation,
            detached: e.detached,
        })
        .collect();
    let mut edges = Vec::with_capacity(export.edges.len());
    let mut in_start = vec![0usize; n + 1];
    let mut next = 0usize;
    for e in &export.edges {
        if e.src >= e.dst || e.dst >= n {
            return Err(Error::Format(format!("edge {} -> {} violates topological order", e.src, e.dst)));
        }
        if e.dst + 1 < next {
            return Err(Error::Format("edges are not grouped by target".into()));
        }
        while next <= e.dst {
            in_start[next] = edges.len();
            next += 1;
        }
        edges.push(Edge {
            src: e.src as u32,
            dst: e.dst as u32,
            weight: e.weight,
            kernel: e.kernel,
            channel: e.channel,
        });
    }
    while next <= n {
        in_start[next] = edges.len();
        next += 1;
    }
    let f = &meta.frozen;
    let frozen = FrozenContext {
        ln1_rstd: f.ln1_rstd.clone(),
        lnf_rstd: f.lnf_rstd.clone(),
        patterns: f
            .patterns
            .iter()
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()))
            .collect::<Result<_>>()?,
        input_scales: f.input_scales.clone(),
        root_reference: f.root_reference,
    };
    Ok(LinearGraph::assemble(
        nodes,
        edges,
        in_start,
        meta.root_spec,
        meta.tokens.clone(),
        meta.n_layers,
        frozen,
    ))
}

/// Graphviz source. With `keep`, only kept nodes and edges between them are
/// drawn. Edge pen width is proportional to `|weight · a_src|`.
pub fn graph_to_dot(graph: &LinearGraph, keep: Option<&[bool]>) -> String {
    let kept = |v: usize| keep.is_none_or(|k| k[v]);
    let flow = |e: &Edge| (e.weight * graph.nodes[e.src as usize].activation).abs();
    let max = graph
        .edges
        .iter()
        .filter(|e| kept(e.src as usize) && kept(e.dst as usize))
        .map(flow)
        .fold(0.0f64, f64::max);
    let mut s = String::from("digraph lincirc {\n  rankdir=BT;\n  node [shape=box, fontsize=10];\n");
    for (i, n) in graph.nodes.iter().enumerate() {
        if !kept(i) {
            continue;
        }
        let style = match n.id.kind {
            NodeKind::Error => ", style=dashed",
            NodeKind::Bias | NodeKind::PosEmbed => ", style=dotted",
            NodeKind::Root => ", style=bold",
            _ => "",
        };
        let _ = writeln!(s, "  n{i} [label=\"{}\"{style}];", n.id);
    }
    for e in &graph.edges {
        if !(kept(e.src as usize) && kept(e.dst as usize)) {
            continue;
        }
        let w = if max > 0.0 { 0.2 + 4.8 * flow(e) / max } else { 1.0 };
        let color = if e.weight * graph.nodes[e.src as usize].activation >= 0.0 {
            "black"
        } else {
            "red"
        };
        let _ = writeln!(
            s,
            "  n{} -> n{} [penwidth={w:.3}, color={color}, tooltip=\"{}\"];",
            e.src, e.dst, e.channel
        );
    }
    s.push_str("}\n");
    s
}
