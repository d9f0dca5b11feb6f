// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention scores as bilinear forms over residual stream terms.
//!
//! With the query and key LayerNorm scales frozen, the scaled score of head
//! `h` is `(Σ_a q_a + q_b)·(Σ_b k_b + k_b')/sqrt(d_head)` where `q_a`, `k_b`
//! are the projections of individual residual terms and the primed terms
//! collect LayerNorm and projection biases. Every pairwise product is one
//! contribution.

use std::collections::HashMap;

use serde::Serialize;

use super::direct::{direct_contribution, FrozenAffine};
use crate::dictionary::DictionarySet;
use crate::lingraph::{Decomposition, NodeId, NodeKind, ReadSite};
use crate::toymodel::{ActivationCache, Transformer};
use crate::{Error, Result};

/// Absolute tolerance on `cached score - Σ terms`.
pub const QK_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "type", content = "node", rename_all = "snake_case")]
pub enum PairSide {
    Node(NodeId),
    Bias,
}

impl PairSide {
    pub fn is_error(&self) -> bool {
        matches!(self, PairSide::Node(n) if n.kind == NodeKind::Error)
    }

    /// Feature or positional term.
    pub fn is_interpretable(&self) -> bool {
        matches!(self, PairSide::Node(n) if n.kind != NodeKind::Error)
    }
}

impl std::fmt::Display for PairSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairSide::Node(n) => write!(f, "{n}"),
            PairSide::Bias => f.write_str("bias"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeaturePairContribution {
    pub query: PairSide,
    pub key: PairSide,
    pub head: usize,
    pub score: f64,
}

impl FeaturePairContribution {
    pub fn involves_error(&self) -> bool {
        self.query.is_error() || self.key.is_error()
    }

    pub fn involves_bias(&self) -> bool {
        self.query == PairSide::Bias || self.key == PairSide::Bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QkAttribution {
    pub layer: usize,
    pub head: usize,
    pub query_pos: usize,
    pub key_pos: usize,
    /// Every term, largest magnitude first.
    pub pairs: Vec<FeaturePairContribution>,
    /// Sum over pairs of interpretable terms (features, positions).
    pub feature_total: f64,
    /// Sum over pairs with a bias side and no error side.
    pub bias_total: f64,
    /// Sum over pairs with an error side.
    pub error_total: f64,
    pub cached_score: f64,
}

impl QkAttribution {
    pub fn total(&self) -> f64 {
        self.feature_total + self.bias_total + self.error_total
    }

    /// `cached score - Σ terms`.
    pub fn residual(&self) -> f64 {
        self.cached_score - self.total()
    }

    /// The `k` largest pairs of interpretable terms.
    pub fn top_feature_pairs(&self, k: usize) -> Vec<&FeaturePairContribution> {
        self.pairs
            .iter()
            .filter(|p| p.query.is_interpretable() && p.key.is_interpretable())
            .take(k)
            .collect()
    }
}

/// Per-position query and key projections of every residual term feeding
/// one attention layer.
pub struct QkContext {
    pub layer: usize,
    n_heads: usize,
    scale: f64,
    /// `[head][pos]` → (terms, bias projection).
    queries: Vec<Vec<Projected>>,
    keys: Vec<Vec<Projected>>,
    scores: Vec<f32>,
    seq: usize,
}

struct Projected {
    terms: Vec<(NodeId, Vec<f64>)>,
    bias: Vec<f64>,
}

fn project(dec: &Decomposition, pos: usize, site: ReadSite, map: &FrozenAffine) -> Result<Projected> {
    let ids: Vec<NodeId> = dec.parts(pos, site).map(|w| w.node).collect();
    let parts: Vec<Vec<f64>> = dec.parts(pos, site).map(|w| w.vector()).collect();
    let x = dec.residual(pos, site);
    let c = direct_contribution(std::slice::from_ref(map), &parts, &x)?;
    Ok(Projected {
        terms: ids.into_iter().zip(c.parts).collect(),
        bias: c.bias,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl QkContext {
    /// Projections for positions `0..n_positions` of attention layer
    /// `layer`.
    pub fn new(
        model: &Transformer,
        cache: &ActivationCache,
        dicts: &DictionarySet,
        layer: usize,
        n_positions: usize,
    ) -> Result<Self> {
        let c = &model.config;
        if layer >= c.n_layers {
            return Err(Error::InvalidInput(format!("layer {layer} out of range")));
        }
        let site = ReadSite::PreAttn(layer);
        let dec = Decomposition::new(model, cache, dicts, site, n_positions)?;
        let p = &model.layers[layer];
        let dh = c.d_head;
        let w_q = FrozenAffine::from_tensor(&p.w_q, Some(p.b_q.data()))?;
        let w_k = FrozenAffine::from_tensor(&p.w_k, Some(p.b_k.data()))?;
        let mut queries = Vec::with_capacity(c.n_heads);
        let mut keys = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let wq = w_q.select_outputs(h * dh..(h + 1) * dh);
            let wk = w_k.select_outputs(h * dh..(h + 1) * dh);
            let mut qs = Vec::with_capacity(n_positions);
            let mut ks = Vec::with_capacity(n_positions);
            for pos in 0..n_positions {
                let ln = FrozenAffine::frozen_layer_norm(
                    p.ln1_g.data(),
                    p.ln1_b.data(),
                    cache.layers[layer].ln1_rstd[pos] as f64,
                );
                qs.push(project(&dec, pos, site, &ln.then(&wq)?)?);
                ks.push(project(&dec, pos, site, &ln.then(&wk)?)?);
            }
            queries.push(qs);
            keys.push(ks);
        }
        Ok(QkContext {
            layer,
            n_heads: c.n_heads,
            scale: 1.0 / (dh as f64).sqrt(),
            queries,
            keys,
            scores: cache.layers[layer].scores.data().to_vec(),
            seq: cache.seq_len(),
        })
    }

    pub fn n_positions(&self) -> usize {
        self.queries.first().map_or(0, |q| q.len())
    }

    /// Decomposes the scaled score of `head` from query `i` to key `j`.
    pub fn pair(&self, head: usize, i: usize, j: usize) -> Result<QkAttribution> {
        if head >= self.n_heads {
            return Err(Error::InvalidInput(format!("head {head} out of range")));
        }
        if i >= self.n_positions() {
            return Err(Error::InvalidInput(format!("query position {i} out of range")));
        }
        if j > i {
            return Err(Error::InvalidInput(format!("key position {j} after query {i}")));
        }
        let (q, k) = (&self.queries[head][i], &self.keys[head][j]);
        let mut pairs = Vec::with_capacity((q.terms.len() + 1) * (k.terms.len() + 1));
        let q_sides = q.terms.iter().map(|(id, v)| (PairSide::Node(*id), v)).chain([(PairSide::Bias, &q.bias)]);
        for (qs, qv) in q_sides {
            let k_sides = k.terms.iter().map(|(id, v)| (PairSide::Node(*id), v)).chain([(PairSide::Bias, &k.bias)]);
            for (ks, kv) in k_sides {
                pairs.push(FeaturePairContribution {
                    query: qs,
                    key: ks,
                    head,
                    score: self.scale * dot(qv, kv),
                });
            }
        }
        let (mut feature_total, mut bias_total, mut error_total) = (0.0, 0.0, 0.0);
        for p in &pairs {
            if p.involves_error() {
                error_total += p.score;
            } else if p.involves_bias() {
                bias_total += p.score;
            } else {
                feature_total += p.score;
            }
        }
        pairs.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()));
        Ok(QkAttribution {
            layer: self.layer,
            head,
            query_pos: i,
            key_pos: j,
            pairs,
            feature_total,
            bias_total,
            error_total,
            cached_score: self.scores[(head * self.seq + i) * self.seq + j] as f64,
        })
    }
}

/// Decomposes the pre-softmax score of `head` in attention layer `layer`
/// from query `i` to key `j` over pairs of upstream residual terms.
#[allow(clippy::too_many_arguments)]
pub fn qk_attribute(
    model: &Transformer,
    cache: &ActivationCache,
    dicts: &DictionarySet,
    layer: usize,
    head: usize,
    i: usize,
    j: usize,
) -> Result<QkAttribution> {
    if i >= cache.seq_len() || j >= cache.seq_len() {
        return Err(Error::InvalidInput(format!("positions ({i}, {j}) out of range")));
    }
    if j > i {
        return Err(Error::InvalidInput(format!("key position {j} after query {i}")));
    }
    QkContext::new(model, cache, dicts, layer, i + 1)?.pair(head, i, j)
}

/// A QK decomposition plus, for each attention feature among its top pairs,
/// the decomposition of the attention score that most strongly produced it.
#[derive(Clone, Debug, Serialize)]
pub struct QkTree {
    pub layer: usize,
    pub head: usize,
    pub query_pos: usize,
    pub key_pos: usize,
    pub cached_score: f64,
    pub residual: f64,
    pub top: Vec<FeaturePairContribution>,
    pub children: Vec<(NodeId, QkTree)>,
}

/// The (head, key position) delivering the largest OV contribution to
/// attention feature `node`.
fn strongest_source(model: &Transformer, cache: &ActivationCache, dicts: &DictionarySet, node: &NodeId) -> Result<Option<(usize, usize)>> {
    let hook = node.site.hook(node.layer).expect("attention site");
    let m = dicts.require(hook)?;
    let q = node.feature.expect("feature node");
    let c = &model.config;
    let (d, dh, t) = (c.d_model, c.d_head, cache.seq_len());
    let p = &model.layers[node.layer];
    let lc = &cache.layers[node.layer];
    let i = node.pos;
    let mut best: Option<(f64, usize, usize)> = None;
    let w_v = FrozenAffine::from_tensor(&p.w_v, None)?;
    let w_o = FrozenAffine::from_tensor(&p.w_o, None)?;
    let enc = FrozenAffine::new(m.w_e.row(q).iter().map(|&v| v as f64).collect(), d, 1, vec![0.0])?;
    for h in 0..c.n_heads {
        // Value path of head h read out by the feature's encoder row.
        let path = w_v
            .select_outputs(h * dh..(h + 1) * dh)
            .then(&w_o.select_inputs(h * dh..(h + 1) * dh))?
            .then(&enc)?;
        let ln_free = |j: usize| -> Result<f64> {
            let ln = FrozenAffine::frozen_layer_norm(p.ln1_g.data(), p.ln1_b.data(), lc.ln1_rstd[j] as f64).without_bias();
            let x: Vec<f64> = lc.resid_pre.row(j).iter().map(|&v| v as f64).collect();
            let out = direct_contribution(&[ln, path.clone()], std::slice::from_ref(&x), &x)?;
            Ok(out.parts[0][0])
        };
        for j in 0..=i {
            let pat = lc.patterns.data()[(h * t + i) * t + j] as f64;
            if pat < 1e-3 {
                continue;
            }
            let v = pat * ln_free(j)?;
            if best.is_none_or(|(b, _, _)| v > b) {
                best = Some((v, h, j));
            }
        }
    }
    Ok(best.filter(|(v, _, _)| *v > 0.0).map(|(_, h, j)| (h, j)))
}

/// [`qk_attribute`], repeated on the attention features among the top
/// `top_k` pairs until `depth` levels have been expanded.
#[allow(clippy::too_many_arguments)]
pub fn qk_attribute_recursive(
    model: &Transformer,
    cache: &ActivationCache,
    dicts: &DictionarySet,
    layer: usize,
    head: usize,
    i: usize,
    j: usize,
    depth: usize,
    top_k: usize,
) -> Result<QkTree> {
    let mut contexts: HashMap<usize, QkContext> = HashMap::new();
    expand(model, cache, dicts, &mut contexts, layer, head, i, j, depth.max(1), top_k)
}

#[allow(clippy::too_many_arguments)]
fn expand(
    model: &Transformer,
    cache: &ActivationCache,
    dicts: &DictionarySet,
    contexts: &mut HashMap<usize, QkContext>,
    layer: usize,
    head: usize,
    i: usize,
    j: usize,
    depth: usize,
    top_k: usize,
) -> Result<QkTree> {
    if i >= cache.seq_len() {
        return Err(Error::InvalidInput(format!("query position {i} out of range")));
    }
    if !contexts.contains_key(&layer) {
        contexts.insert(layer, QkContext::new(model, cache, dicts, layer, cache.seq_len())?);
    }
    let a = contexts[&layer].pair(head, i, j)?;
    let top: Vec<FeaturePairContribution> = a.top_feature_pairs(top_k).into_iter().cloned().collect();
    let mut children = Vec::new();
    if depth > 1 {
        let mut seen = Vec::new();
        for p in &top {
            for side in [p.query, p.key] {
                if let PairSide::Node(n) = side {
                    if n.kind != NodeKind::AttnFeature || seen.contains(&n) {
                        continue;
                    }
                    seen.push(n);
                    if let Some((h, src)) = strongest_source(model, cache, dicts, &n)? {
                        let sub = expand(model, cache, dicts, contexts, n.layer, h, n.pos, src, depth - 1, top_k)?;
                        children.push((n, sub));
                    }
                }
            }
        }
    }
    Ok(QkTree {
        layer,
        head,
        query_pos: i,
        key_pos: j,
        cached_score: a.cached_score,
        residual: a.residual(),
        top,
        children,
    })
}
