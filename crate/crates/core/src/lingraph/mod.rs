// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact linear computation graphs over dictionary features.
//!
//! With attention patterns and LayerNorm scales frozen from one forward pass,
//! every path from a dictionary feature to a later feature's pre-activation
//! (or to a logit) is linear. A [`LinearGraph`] records those coefficients:
//! each non-leaf node's activation is `ReLU(Σ k·a)` over its in-edges, with
//! dictionary errors and additive biases entering as constant leaves.
//!
//! Residual stream writers are ordered by *stage*: embeddings are stage 0,
//! attention in layer `l` is `1 + 2l`, the MLP of layer `l` is `2 + 2l` and
//! the logits come last. A node reads every writer at an earlier stage of
//! its own position; attention additionally reads earlier positions.

mod build;
mod decompose;
mod export;
mod replay;
mod verify;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dictionary::{HookSpec, Site};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub use build::{build_graph, ov_edge, ov_kernel, transcoder_edge, EdgeMatrix};
pub use decompose::{decompose_residual, Decomposition, ReadSite, Writer};
pub use export::{graph_from_json, graph_to_dot, graph_to_json, GraphExport};
pub use replay::replay_gradients;
pub use verify::{verify_graph, Offender, VerifyReport, NODE_TOL, ROOT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    EmbedFeature,
    PosEmbed,
    AttnFeature,
    TranscoderFeature,
    Error,
    Bias,
    Root,
}

/// Which residual writer (or reader, for bias and root nodes) a node
/// belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphSite {
    Embed,
    Attn,
    Mlp,
    Logit,
}

impl GraphSite {
    pub fn letter(self) -> char {
        match self {
            GraphSite::Embed => 'E',
            GraphSite::Attn => 'A',
            GraphSite::Mlp => 'M',
            GraphSite::Logit => 'U',
        }
    }

    /// The dictionary writing at this site, if any.
    pub fn hook(self, layer: usize) -> Option<HookSpec> {
        match self {
            GraphSite::Embed => Some(HookSpec::new(0, Site::WordEmbed)),
            GraphSite::Attn => Some(HookSpec::new(layer, Site::AttnOut)),
            GraphSite::Mlp => Some(HookSpec::new(layer, Site::Mlp)),
            GraphSite::Logit => None,
        }
    }

    pub fn stage(self, layer: usize, n_layers: usize) -> usize {
        match self {
            GraphSite::Embed => 0,
            GraphSite::Attn => 1 + 2 * layer,
            GraphSite::Mlp => 2 + 2 * layer,
            GraphSite::Logit => 1 + 2 * n_layers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub layer: usize,
    pub site: GraphSite,
    /// Dictionary feature, or the token id of a logit root. `None` for
    /// error, bias and positional nodes.
    pub feature: Option<usize>,
    pub pos: usize,
}

impl NodeId {
    pub fn feature(site: GraphSite, layer: usize, feature: usize, pos: usize) -> Self {
        let kind = match site {
            GraphSite::Embed => NodeKind::EmbedFeature,
            GraphSite::Attn => NodeKind::AttnFeature,
            GraphSite::Mlp => NodeKind::TranscoderFeature,
            GraphSite::Logit => NodeKind::Root,
        };
        NodeId {
            kind,
            layer,
            site,
            feature: Some(feature),
            pos,
        }
    }

    pub fn error(site: GraphSite, layer: usize, pos: usize) -> Self {
        NodeId {
            kind: NodeKind::Error,
            layer,
            site,
            feature: None,
            pos,
        }
    }

    pub fn bias(site: GraphSite, layer: usize, pos: usize) -> Self {
        NodeId {
            kind: NodeKind::Bias,
            layer,
            site,
            feature: None,
            pos,
        }
    }

    pub fn pos_embed(pos: usize) -> Self {
        NodeId {
            kind: NodeKind::PosEmbed,
            layer: 0,
            site: GraphSite::Embed,
            feature: None,
            pos,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self.kind,
            NodeKind::EmbedFeature | NodeKind::PosEmbed | NodeKind::Error | NodeKind::Bias
        )
    }

    /// Leaves that carry meaning: embedding features, positions and biases.
    pub fn is_interpretable_leaf(&self) -> bool {
        self.is_leaf() && self.kind != NodeKind::Error
    }

    pub fn stage(&self, n_layers: usize) -> usize {
        self.site.stage(self.layer, n_layers)
    }

    /// Sort key giving a topological order: position, stage, then biases
    /// before features before errors before the root.
    pub fn order_key(&self, n_layers: usize) -> (usize, usize, u8, usize) {
        let sub = match self.kind {
            NodeKind::Bias => 0,
            NodeKind::Error => 2,
            NodeKind::Root => 3,
            _ => 1,
        };
        (self.pos, self.stage(n_layers), sub, self.feature.unwrap_or(0))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.kind, self.feature) {
            (NodeKind::Error, _) => "err".to_string(),
            (NodeKind::Bias, _) => "bias".to_string(),
            (NodeKind::PosEmbed, _) => "pos".to_string(),
            (_, Some(i)) => i.to_string(),
            (_, None) => "?".to_string(),
        };
        write!(f, "L{}{}.{}@{}", self.layer, self.site.letter(), tag, self.pos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    /// Through the value/output path of one attention head.
    OvHead(u8),
    /// Through a transcoder encoder at the same position.
    Transcoder,
    /// Through the frozen final LayerNorm and the unembedding.
    Unembed,
    /// From a bias leaf: the summed contribution of every additive bias on
    /// the path into the target.
    Bias,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::OvHead(h) => write!(f, "ov-head-{h}"),
            Channel::Transcoder => f.write_str("transcoder"),
            Channel::Unembed => f.write_str("unembed"),
            Channel::Bias => f.write_str("bias"),
        }
    }
}

/// Which scalar the graph explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RootSpec {
    Logit { pos: usize, token: usize },
    /// An attention-output SAE feature (`site = Attn`) or transcoder
    /// feature (`site = Mlp`).
    Feature { site: GraphSite, layer: usize, feature: usize, pos: usize },
}

impl RootSpec {
    pub fn pos(&self) -> usize {
        match *self {
            RootSpec::Logit { pos, .. } | RootSpec::Feature { pos, .. } => pos,
        }
    }

    pub fn node_id(&self, n_layers: usize) -> NodeId {
        match *self {
            RootSpec::Logit { pos, token } => NodeId {
                kind: NodeKind::Root,
                layer: n_layers,
                site: GraphSite::Logit,
                feature: Some(token),
                pos,
            },
            RootSpec::Feature { site, layer, feature, pos } => NodeId {
                kind: NodeKind::Root,
                layer,
                site,
                feature: Some(feature),
                pos,
            },
        }
    }

    /// Parses `logit:POS:TOK` or `feature:LAYER:SITE:IDX:POS` where `SITE`
    /// is `attn` or `mlp`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad root spec {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["logit", pos, tok] => Ok(RootSpec::Logit {
                pos: num(pos)?,
                token: num(tok)?,
            }),
            ["feature", layer, site, idx, pos] => {
                let site = match *site {
                    "attn" | "attn-out" | "A" => GraphSite::Attn,
                    "mlp" | "M" => GraphSite::Mlp,
                    _ => return Err(bad()),
                };
                Ok(RootSpec::Feature {
                    site,
                    layer: num(layer)?,
                    feature: num(idx)?,
                    pos: num(pos)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for RootSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RootSpec::Logit { pos, token } => write!(f, "logit:{pos}:{token}"),
            RootSpec::Feature { site, layer, feature, pos } => {
                let s = if site == GraphSite::Attn { "attn" } else { "mlp" };
                write!(f, "feature:{layer}:{s}:{feature}:{pos}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNode {
    pub id: NodeId,
    /// Feature activation; 1 for error, bias and positional leaves; the
    /// pre-activation (logit or feature value) for the root.
    pub activation: f64,
    pub detached: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    /// `d a_dst / d a_src` with every frozen factor applied.
    pub weight: f64,
    /// The input-independent factor of `weight`: a pure weight product for
    /// feature-to-feature edges. For error and positional sources it is the
    /// weight with the target-side gate removed.
    pub kernel: f64,
    pub channel: Channel,
}

/// Input-dependent quantities frozen from the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenContext {
    /// Per layer, the first LayerNorm's `1/σ` per position.
    pub ln1_rstd: Vec<Vec<f32>>,
    pub lnf_rstd: Vec<f32>,
    /// Per layer, `[n_heads, T, T]` post-softmax patterns.
    pub patterns: Vec<Tensor>,
    /// Per dictionary, the input normalisation factor per position.
    pub input_scales: Vec<(HookSpec, Vec<f32>)>,
    /// The root's value in the cached forward pass.
    pub root_reference: f64,
}

#[derive(Clone, Debug)]
pub struct LinearGraph {
    /// Nodes in topological order; the root is last.
    pub nodes: Vec<FeatureNode>,
    /// Edges grouped by target, in node order.
    pub edges: Vec<Edge>,
    /// `in_start[v]..in_start[v + 1]` indexes the in-edges of node `v`.
    pub in_start: Vec<usize>,
    pub root: usize,
    pub root_spec: RootSpec,
    pub tokens: Vec<usize>,
    pub n_layers: usize,
    pub frozen: FrozenContext,
    index: HashMap<NodeId, usize>,
}

impl LinearGraph {
    pub(crate) fn assemble(
        nodes: Vec<FeatureNode>,
        edges: Vec<Edge>,
        in_start: Vec<usize>,
        root_spec: RootSpec,
        tokens: Vec<usize>,
        n_layers: usize,
        frozen: FrozenContext,
    ) -> Self {
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        LinearGraph {
            root: nodes.len() - 1,
            nodes,
            edges,
            in_start,
            root_spec,
            tokens,
            n_layers,
            frozen,
            index,
        }
    }

    /// A graph from explicit nodes (already in topological order, root
    /// last) and `(src, dst, weight)` edges. Used for hand-built graphs;
    /// the frozen context is empty.
    pub fn from_edges(nodes: Vec<FeatureNode>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::InvalidInput("graph needs a root".into()));
        }
        let mut sorted: Vec<(usize, usize, f64)> = edges.to_vec();
        if let Some(&(s, d, _)) = sorted.iter().find(|(s, d, _)| s >= d || *d >= n) {
            return Err(Error::InvalidInput(format!("edge {s} -> {d} violates topological order")));
        }
        sorted.sort_by_key(|&(s, d, _)| (d, s));
        let mut in_start = vec![0usize; n + 1];
        for &(_, d, _) in &sorted {
            in_start[d + 1] += 1;
        }
        for v in 0..n {
            in_start[v + 1] += in_start[v];
        }
        let edges = sorted
            .into_iter()
            .map(|(s, d, w)| Edge {
                src: s as u32,
                dst: d as u32,
                weight: w,
                kernel: w,
                channel: Channel::Transcoder,
            })
            .collect();
        let root = nodes[n - 1].id;
        let root_spec = RootSpec::Logit {
            pos: root.pos,
            token: root.feature.unwrap_or(0),
        };
        let frozen = FrozenContext {
            ln1_rstd: Vec::new(),
            lnf_rstd: Vec::new(),
            patterns: Vec::new(),
            input_scales: Vec::new(),
            root_reference: nodes[n - 1].activation,
        };
        let n_layers = nodes.iter().map(|v| v.id.layer).max().unwrap_or(0);
        Ok(Self::assemble(nodes, edges, in_start, root_spec, Vec::new(), n_layers, frozen))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &NodeId) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::NodeNotFound(id.to_string()))
    }

    pub fn in_edges(&self, v: usize) -> &[Edge] {
        &self.edges[self.in_start[v]..self.in_start[v + 1]]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.nodes[v].id.is_leaf()
    }

    /// The value each node takes when recomputed from its in-edges
    /// (`Σ k·a` before the ReLU). Leaves keep their stored activation.
    pub fn pre_activation(&self, v: usize) -> f64 {
        if self.is_leaf(v) {
            return self.nodes[v].activation;
        }
        self.in_edges(v)
            .iter()
            .map(|e| e.weight * self.nodes[e.src as usize].activation)
            .sum()
    }

    /// Forward-evaluates the graph from its leaves, skipping nodes for which
    /// `keep` is false, and returns the root value. ReLU gates stay as they
    /// were in the cached forward pass: every kept node is linear.
    pub fn evaluate(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let mut value = vec![0.0f64; self.nodes.len()];
        for v in 0..self.nodes.len() {
            if !keep(v) {
                continue;
            }
            if self.is_leaf(v) {
                value[v] = self.nodes[v].activation;
                continue;
            }
            let pre: f64 = self
                .in_edges(v)
                .iter()
                .map(|e| e.weight * value[e.src as usize])
                .sum();
            value[v] = pre;
        }
        value[self.root]
    }

    /// Count of nodes of each kind.
    pub fn kind_counts(&self) -> Vec<(NodeKind, usize)> {
        let mut m: std::collections::BTreeMap<NodeKind, usize> = Default::default();
        for n in &self.nodes {
            *m.entry(n.id.kind).or_default() += 1;
        }
        m.into_iter().collect()
    }
}
