// SPDX-License-Identifier: MIT OR Apache-2.0

//! Graph construction and the input-independent edge kernels.

use std::collections::HashMap;

use super::decompose::{module_codes, to_f64, upstream_hooks, Decomposition, ReadSite, Writer};
use super::{Channel, Edge, FeatureNode, FrozenContext, GraphSite, LinearGraph, NodeId, RootSpec};
use crate::attribution::direct::{direct_contribution, FrozenAffine};
use crate::dictionary::{DictKind, DictionaryModule, DictionarySet, Site};
use crate::toymodel::{ActivationCache, Transformer};
use crate::{Error, Result};

/// Sequential dot product. Every kernel goes through this one routine so
/// that equal weights always give bit-equal results.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Dense `[rows, cols]` matrix of edge coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EdgeMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// `W_E^down · W_D^up`: entry `(j, i)` is the coefficient with which one
/// unit of upstream feature `i` (in the downstream module's normalised
/// coordinates) enters the pre-activation of transcoder feature `j`.
pub fn transcoder_edge(up: &DictionaryModule, down: &DictionaryModule) -> Result<EdgeMatrix> {
    if down.kind != DictKind::Transcoder {
        return Err(Error::InvalidInput(format!("{} is not a transcoder", down.hook)));
    }
    if up.d_model() != down.d_model() {
        return Err(Error::shape(
            "transcoder edge",
            format!("d_model {} vs {}", up.d_model(), down.d_model()),
        ));
    }
    let cols: Vec<Vec<f64>> = (0..up.d_sae()).map(|i| to_f64(&up.decoder_column(i))).collect();
    let mut data = Vec::with_capacity(down.d_sae() * up.d_sae());
    for j in 0..down.d_sae() {
        let row = to_f64(down.w_e.row(j));
        data.extend(cols.iter().map(|c| dot(c, &row)));
    }
    Ok(EdgeMatrix {
        rows: down.d_sae(),
        cols: up.d_sae(),
        data,
    })
}

/// What an attention-output SAE feature reads through each head: for head
/// `h`, `read[h] = C(g ⊙ W_V^h W_O^h e)` with `e` the encoder row and `C`
/// centring, so that a source vector `u` at key position `j` contributes
/// `rstd_j · u·read[h]` per unit pattern weight. `bias` collects the
/// LayerNorm bias, value bias and output bias terms (pattern rows sum to 1).
struct OvReader {
    read: Vec<Vec<f64>>,
    bias: f64,
}

fn ov_reader(model: &Transformer, layer: usize, e: &[f64]) -> OvReader {
    let c = &model.config;
    let (d, dh, nh) = (c.d_model, c.d_head, c.n_heads);
    let p = &model.layers[layer];
    let g = p.ln1_g.data();
    let beta = p.ln1_b.data();
    let mut read = Vec::with_capacity(nh);
    let mut bias = dot(&to_f64(p.b_o.data()), e);
    for h in 0..nh {
        // t = W_O^h e, m = W_V^h t.
        let t: Vec<f64> = (0..dh).map(|k| dot(&to_f64(p.w_o.row(h * dh + k)), e)).collect();
        let m: Vec<f64> = (0..d)
            .map(|r| dot(&to_f64(&p.w_v.row(r)[h * dh..(h + 1) * dh]), &t))
            .collect();
        bias += dot(&to_f64(beta), &m) + dot(&to_f64(&p.b_v.data()[h * dh..(h + 1) * dh]), &t);
        let mut r: Vec<f64> = m.iter().zip(g).map(|(a, &b)| a * b as f64).collect();
        center(&mut r);
        read.push(r);
    }
    OvReader { read, bias }
}

fn check_ov_modules(up: &DictionaryModule, down: &DictionaryModule, n_layers: usize) -> Result<usize> {
    if down.hook.site != Site::AttnOut {
        return Err(Error::InvalidInput(format!("{} is not an attention-output SAE", down.hook)));
    }
    let layer = down.hook.layer;
    let up_stage = match up.hook.site {
        Site::WordEmbed => 0,
        Site::AttnOut => GraphSite::Attn.stage(up.hook.layer, n_layers),
        Site::Mlp => GraphSite::Mlp.stage(up.hook.layer, n_layers),
        _ => return Err(Error::InvalidInput(format!("{} does not write to the residual stream", up.hook))),
    };
    if up_stage >= GraphSite::Attn.stage(layer, n_layers) {
        return Err(Error::InvalidInput(format!("{} does not feed {}", up.hook, down.hook)));
    }
    if up.d_model() != down.d_model() {
        return Err(Error::shape("ov edge", "d_model mismatch"));
    }
    Ok(layer)
}

/// The pattern-stripped OV coefficient `W_D^up[:, p] · C(g ⊙ W_V^h W_O^h
/// W_E^down[q])` of head `h`. Depends on weights only.
pub fn ov_kernel(
    model: &Transformer,
    up: &DictionaryModule,
    p: usize,
    head: usize,
    down: &DictionaryModule,
    q: usize,
) -> Result<f64> {
    let layer = check_ov_modules(up, down, model.config.n_layers)?;
    if head >= model.config.n_heads || p >= up.d_sae() || q >= down.d_sae() {
        return Err(Error::InvalidInput("ov kernel index out of range".into()));
    }
    let r = ov_reader(model, layer, &to_f64(down.w_e.row(q)));
    Ok(dot(&to_f64(&up.decoder_column(p)), &r.read[head]))
}

/// Edge weight from upstream feature `p` at key position `j` to attention
/// SAE feature `q` at query position `i` through head `h`, per unit of
/// upstream activation, with the pattern and LayerNorm scale frozen from
/// `cache`.
///
/// Evaluated as a chain of frozen affine maps: LayerNorm, `W_V^h`, the
/// pattern weight, `W_O^h`, and the downstream encoder row.
#[allow(clippy::too_many_arguments)]
pub fn ov_edge(
    model: &Transformer,
    cache: &ActivationCache,
    up: &DictionaryModule,
    p: usize,
    head: usize,
    i: usize,
    j: usize,
    down: &DictionaryModule,
    q: usize,
) -> Result<f64> {
    let layer = check_ov_modules(up, down, model.config.n_layers)?;
    if j > i {
        return Err(Error::InvalidInput(format!("acausal edge: key {j} after query {i}")));
    }
    if i >= cache.seq_len() || head >= model.config.n_heads {
        return Err(Error::InvalidInput("ov edge index out of range".into()));
    }
    let c = &model.config;
    let (t, dh) = (cache.seq_len(), c.d_head);
    let lp = &model.layers[layer];
    let (_, s_up) = module_codes(up, cache, j + 1)?;
    let (_, s_down) = module_codes(down, cache, i + 1)?;
    let pattern = cache.layers[layer].patterns.data()[(head * t + i) * t + j] as f64;
    let ln = FrozenAffine::frozen_layer_norm(lp.ln1_g.data(), lp.ln1_b.data(), cache.layers[layer].ln1_rstd[j] as f64);
    let w_v = FrozenAffine::from_tensor(&lp.w_v, None)?.select_outputs(head * dh..(head + 1) * dh);
    let w_o = FrozenAffine::from_tensor(&lp.w_o, None)?.select_inputs(head * dh..(head + 1) * dh);
    let e: Vec<f64> = to_f64(down.w_e.row(q)).iter().map(|v| v * s_down[i] as f64).collect();
    let readout = FrozenAffine::new(e, c.d_model, 1, vec![0.0])?;
    let unit: Vec<f64> = to_f64(&up.decoder_column(p))
        .iter()
        .map(|v| v * up.scaler(p) as f64 / s_up[j] as f64)
        .collect();
    let stages = [
        ln.without_bias(),
        w_v,
        FrozenAffine::scalar(pattern, dh),
        w_o,
        readout,
    ];
    let out = direct_contribution(&stages, std::slice::from_ref(&unit), &unit)?;
    Ok(out.parts[0][0])
}

/// A node whose activation is computed from in-edges.
struct Target {
    id: NodeId,
    /// Dictionary feature or logit token.
    index: usize,
}

struct Builder<'a> {
    model: &'a Transformer,
    cache: &'a ActivationCache,
    dicts: &'a DictionarySet,
    dec: &'a Decomposition,
    index: HashMap<NodeId, u32>,
}

impl Builder<'_> {
    fn src(&self, id: &NodeId) -> u32 {
        self.index[id]
    }

    fn push_feature_edges(&self, out: &mut Vec<Edge>, dst: u32, writers: &[&Writer], reads: &[Vec<f64>], gates: &[f64], channel: impl Fn(usize) -> Channel) {
        for w in writers {
            let src = self.src(&w.node);
            for (h, (r, &gate)) in reads.iter().zip(gates).enumerate() {
                if gate == 0.0 {
                    continue;
                }
                let kernel = dot(&w.basis, r);
                let weight = gate * w.factor * kernel;
                if weight != 0.0 {
                    out.push(Edge {
                        src,
                        dst,
                        weight,
                        kernel,
                        channel: channel(h),
                    });
                }
            }
        }
    }

    fn edges_into(&self, t: &Target, dst: u32, out: &mut Vec<Edge>) -> Result<()> {
        let i = t.id.pos;
        let bias_id = NodeId::bias(t.id.site, t.id.layer, i);
        let bias = match t.id.site {
            GraphSite::Attn => {
                let l = t.id.layer;
                let hook = t.id.site.hook(l).expect("dictionary site");
                let m = self.dicts.require(hook)?;
                let s = self.dec_scale(hook, m, i)?;
                let e = to_f64(m.w_e.row(t.index));
                let reader = ov_reader(self.model, l, &e);
                let nh = self.model.config.n_heads;
                let seq = self.cache.seq_len();
                let patterns = self.cache.layers[l].patterns.data();
                let site = ReadSite::PreAttn(l);
                for j in 0..=i {
                    let rstd = self.cache.layers[l].ln1_rstd[j] as f64;
                    let gates: Vec<f64> = (0..nh)
                        .map(|h| s * patterns[(h * seq + i) * seq + j] as f64 * rstd)
                        .collect();
                    let ws: Vec<&Writer> = self.dec.parts(j, site).collect();
                    self.push_feature_edges(out, dst, &ws, &reader.read, &gates, |h| Channel::OvHead(h as u8));
                }
                m.b_e.data()[t.index] as f64 + s * reader.bias
            }
            GraphSite::Mlp => {
                let l = t.id.layer;
                let hook = t.id.site.hook(l).expect("dictionary site");
                let m = self.dicts.require(hook)?;
                let s = self.dec_scale(hook, m, i)?;
                let e = to_f64(m.w_e.row(t.index));
                let ws: Vec<&Writer> = self.dec.parts(i, ReadSite::PreMlp(l)).collect();
                self.push_feature_edges(out, dst, &ws, &[e], &[s], |_| Channel::Transcoder);
                m.b_e.data()[t.index] as f64
            }
            GraphSite::Logit => {
                let w_u = &self.model.w_u;
                let v = w_u.shape()[1];
                let col: Vec<f64> = (0..w_u.shape()[0]).map(|k| w_u.data()[k * v + t.index] as f64).collect();
                let mut r: Vec<f64> = col.iter().zip(self.model.lnf_g.data()).map(|(a, &g)| a * g as f64).collect();
                center(&mut r);
                let rstd = self.cache.lnf_rstd[i] as f64;
                let ws: Vec<&Writer> = self.dec.parts(i, ReadSite::Final).collect();
                self.push_feature_edges(out, dst, &ws, &[r], &[rstd], |_| Channel::Unembed);
                dot(&to_f64(self.model.lnf_b.data()), &col)
            }
            GraphSite::Embed => unreachable!("embedding features are leaves"),
        };
        out.push(Edge {
            src: self.src(&bias_id),
            dst,
            weight: bias,
            kernel: bias,
            channel: Channel::Bias,
        });
        Ok(())
    }

    /// Input normalisation factor of `hook` at position `i`; the root's own
    /// dictionary is not part of the decomposition and is recomputed.
    fn dec_scale(&self, hook: crate::dictionary::HookSpec, m: &DictionaryModule, i: usize) -> Result<f64> {
        if let Some(s) = self.dec.scales(hook) {
            return Ok(s[i] as f64);
        }
        let (_, s) = module_codes(m, self.cache, i + 1)?;
        Ok(s[i] as f64)
    }
}

/// Builds the linear computation graph explaining `root` in one cached
/// forward pass.
///
/// Nodes are every active alive feature of the embedding, attention-output
/// and transcoder dictionaries at positions up to the root's and stages
/// below it, one positional leaf per position, one error leaf per
/// (dictionary, position), one bias leaf per computed node's (site,
/// position), and the root.
pub fn build_graph(model: &Transformer, cache: &ActivationCache, dicts: &DictionarySet, root: RootSpec) -> Result<LinearGraph> {
    let n_layers = model.config.n_layers;
    let r = root.pos();
    if r >= cache.seq_len() {
        return Err(Error::InvalidInput(format!("root position {r} beyond sequence length {}", cache.seq_len())));
    }
    let root_id = root.node_id(n_layers);
    let (root_index, root_reference) = match root {
        RootSpec::Logit { token, .. } => {
            let v = model.config.vocab_size;
            if token >= v {
                return Err(Error::InvalidInput(format!("token {token} outside vocabulary of {v}")));
            }
            (token, cache.logits.data()[r * v + token] as f64)
        }
        RootSpec::Feature { site, layer, feature, .. } => {
            if !matches!(site, GraphSite::Attn | GraphSite::Mlp) || layer >= n_layers {
                return Err(Error::InvalidInput(format!("root {root} is not an attention or transcoder feature")));
            }
            let m = dicts.require(site.hook(layer).expect("dictionary site"))?;
            if feature >= m.d_sae() {
                return Err(Error::InvalidInput(format!("feature {feature} outside {}", m.hook)));
            }
            let (f, _) = module_codes(m, cache, r + 1)?;
            let a = f.row(r)[feature];
            if a <= 0.0 {
                return Err(Error::UnreachableRoot(format!("{root_id} is inactive")));
            }
            (feature, a as f64)
        }
    };
    let root_stage = root_id.stage(n_layers);
    let upto = ReadSite::at_stage(root_stage, n_layers);
    for (site, layer) in upstream_hooks(n_layers, upto) {
        dicts.require(site.hook(layer).expect("dictionary site"))?;
    }
    let dec = Decomposition::new(model, cache, dicts, upto, r + 1)?;

    let mut nodes: Vec<FeatureNode> = Vec::new();
    let mut targets: Vec<Target> = Vec::new();
    for j in 0..=r {
        for w in dec.parts(j, upto) {
            nodes.push(FeatureNode {
                id: w.node,
                activation: w.activation,
                detached: false,
            });
            if !w.node.is_leaf() {
                targets.push(Target {
                    id: w.node,
                    index: w.node.feature.expect("feature node"),
                });
            }
        }
    }
    targets.push(Target {
        id: root_id,
        index: root_index,
    });
    for t in &targets {
        nodes.push(FeatureNode {
            id: NodeId::bias(t.id.site, t.id.layer, t.id.pos),
            activation: 1.0,
            detached: false,
        });
    }
    nodes.push(FeatureNode {
        id: root_id,
        activation: root_reference,
        detached: false,
    });
    nodes.sort_by_key(|n| n.id.order_key(n_layers));
    debug_assert_eq!(nodes.last().map(|n| n.id), Some(root_id));

    let index: HashMap<NodeId, u32> = nodes.iter().enumerate().map(|(i, n)| (n.id, i as u32)).collect();
    targets.sort_by_key(|t| index[&t.id]);
    let builder = Builder {
        model,
        cache,
        dicts,
        dec: &dec,
        index,
    };
    let mut edges = Vec::new();
    let mut in_start = vec![0usize; nodes.len() + 1];
    let mut next = 0usize;
    for t in &targets {
        let dst = builder.index[&t.id];
        while next <= dst as usize {
            in_start[next] = edges.len();
            next += 1;
        }
        builder.edges_into(t, dst, &mut edges)?;
    }
    while next <= nodes.len() {
        in_start[next] = edges.len();
        next += 1;
    }

    let frozen = FrozenContext {
        ln1_rstd: cache.layers.iter().map(|l| l.ln1_rstd.clone()).collect(),
        lnf_rstd: cache.lnf_rstd.clone(),
        patterns: cache.layers.iter().map(|l| l.patterns.clone()).collect(),
        input_scales: dec.scales.clone(),
        root_reference,
    };
    Ok(LinearGraph::assemble(nodes, edges, in_start, root, cache.tokens.clone(), n_layers, frozen))
}
