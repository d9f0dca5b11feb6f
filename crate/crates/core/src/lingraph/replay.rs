// SPDX-License-Identifier: MIT OR Apache-2.0

//! Re-runs the dictionary-substituted forward pass on the autodiff tape with
//! attention patterns and LayerNorm scales frozen, giving an independent
//! route to the gradients the graph encodes.

use super::decompose::{Decomposition, ReadSite};
use super::{GraphSite, LinearGraph, NodeId, NodeKind, RootSpec};
use crate::dictionary::{DictionaryModule, DictionarySet};
use crate::numerics::{Tape, Tensor, Var};
use crate::toymodel::{ActivationCache, Transformer};
use crate::{Error, Result};

fn encode(tape: &mut Tape, m: &DictionaryModule, x: Var, scales: &[f32]) -> Result<Var> {
    let s = tape.constant(Tensor::from_vec(scales.to_vec()));
    let w_e = tape.constant(m.w_e.clone());
    let b_e = tape.constant(m.b_e.clone());
    let alive = tape.constant(m.alive_mask_tensor());
    let xn = tape.mul_col(x, s)?;
    let pre = tape.matmul_nt(xn, w_e)?;
    let pre = tape.add_row(pre, b_e)?;
    let f = tape.relu(pre)?;
    tape.mul_row(f, alive)
}

/// Raw-unit reconstruction plus the frozen error term.
fn write(tape: &mut Tape, m: &DictionaryModule, f: Var, scales: &[f32], error: Tensor) -> Result<Var> {
    let scaler = tape.constant(Tensor::from_vec(m.scalers()));
    let inv = tape.constant(Tensor::from_vec(scales.iter().map(|s| 1.0 / s).collect()));
    let w_d = tape.constant(m.w_d.clone());
    let err = tape.constant(error);
    let fs = tape.mul_row(f, scaler)?;
    let r = tape.matmul_nt(fs, w_d)?;
    let r = tape.mul_col(r, inv)?;
    tape.add(r, err)
}

fn select(tape: &mut Tape, x: Var, row: usize, col: usize) -> Result<Var> {
    let (r, c) = tape.value(x).dims2();
    let mut onehot = Tensor::zeros(&[r, c]);
    onehot.data_mut()[row * c + col] = 1.0;
    let m = tape.constant(onehot);
    let y = tape.mul(x, m)?;
    tape.sum(y)
}

fn head_patterns(p: &Tensor, n: usize) -> Tensor {
    let (h, t) = (p.shape()[0], p.shape()[1]);
    Tensor::from_fn(&[h, n, n], |k| {
        let (hh, rest) = (k / (n * n), k % (n * n));
        p.data()[(hh * t + rest / n) * t + rest % n]
    })
}

/// `d root / d a_v` for every feature node of `graph`, obtained by
/// backpropagating through the frozen-pattern forward pass on the tape.
/// Leaves that are not features get `None`; the root gets 1.
pub fn replay_gradients(
    model: &Transformer,
    cache: &ActivationCache,
    dicts: &DictionarySet,
    graph: &LinearGraph,
) -> Result<Vec<Option<f64>>> {
    let c = &model.config;
    let (nl, nh) = (c.n_layers, c.n_heads);
    let n = graph.root_spec.pos() + 1;
    let root_id = graph.root_spec.node_id(nl);
    let root_stage = root_id.stage(nl);
    let dec = Decomposition::new(model, cache, dicts, ReadSite::at_stage(root_stage, nl), n)?;
    let error_rows = |site: GraphSite, layer: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * c.d_model);
        for j in 0..n {
            let id = NodeId::error(site, layer, j);
            let w = dec.writers[j]
                .iter()
                .find(|w| w.node == id)
                .ok_or_else(|| Error::NodeNotFound(id.to_string()))?;
            data.extend(w.basis.iter().map(|&v| v as f32));
        }
        Tensor::new(vec![n, c.d_model], data)
    };
    let scales = |site: GraphSite, layer: usize| -> Result<Vec<f32>> {
        let hook = site.hook(layer).expect("dictionary site");
        match dec.scales(hook) {
            Some(s) => Ok(s.to_vec()),
            None => {
                let m = dicts.require(hook)?;
                Ok(super::decompose::module_codes(m, cache, n)?.1)
            }
        }
    };

    let mut tape = Tape::new();
    let mut features: Vec<(GraphSite, usize, Var)> = Vec::new();
    let embed = dicts.require(GraphSite::Embed.hook(0).expect("embed"))?;
    let f_e = tape.leaf(dec.codes(embed.hook).expect("embed codes").clone());
    features.push((GraphSite::Embed, 0, f_e));
    let s_e = scales(GraphSite::Embed, 0)?;
    let mut resid = write(&mut tape, embed, f_e, &s_e, error_rows(GraphSite::Embed, 0)?)?;
    let pos = tape.constant(Tensor::new(vec![n, c.d_model], cache.pos_embed.data()[..n * c.d_model].to_vec())?);
    resid = tape.add(resid, pos)?;

    let mut root_var = None;
    for (l, p) in model.layers.iter().enumerate() {
        if GraphSite::Attn.stage(l, nl) > root_stage {
            break;
        }
        let g = tape.constant(p.ln1_g.clone());
        let b = tape.constant(p.ln1_b.clone());
        let ln = tape.frozen_layer_norm(resid, g, b, cache.layers[l].ln1_rstd[..n].to_vec())?;
        let w_v = tape.constant(p.w_v.clone());
        let b_v = tape.constant(p.b_v.clone());
        let v = tape.matmul(ln, w_v)?;
        let v = tape.add_row(v, b_v)?;
        let vh = tape.split_heads(v, 1, n, nh)?;
        let pat = tape.constant(head_patterns(&cache.layers[l].patterns, n));
        let z = tape.bmm(pat, vh, false)?;
        let z = tape.merge_heads(z, 1, n, nh)?;
        let w_o = tape.constant(p.w_o.clone());
        let b_o = tape.constant(p.b_o.clone());
        let attn = tape.matmul(z, w_o)?;
        let attn = tape.add_row(attn, b_o)?;
        let m = dicts.require(GraphSite::Attn.hook(l).expect("attn"))?;
        let s = scales(GraphSite::Attn, l)?;
        let f = encode(&mut tape, m, attn, &s)?;
        if let RootSpec::Feature { site: GraphSite::Attn, layer, feature, pos } = graph.root_spec {
            if layer == l {
                root_var = Some(select(&mut tape, f, pos, feature)?);
                break;
            }
        }
        features.push((GraphSite::Attn, l, f));
        let out = write(&mut tape, m, f, &s, error_rows(GraphSite::Attn, l)?)?;
        let mid = tape.add(resid, out)?;

        let m = dicts.require(GraphSite::Mlp.hook(l).expect("mlp"))?;
        let s = scales(GraphSite::Mlp, l)?;
        let f = encode(&mut tape, m, mid, &s)?;
        if let RootSpec::Feature { site: GraphSite::Mlp, layer, feature, pos } = graph.root_spec {
            if layer == l {
                root_var = Some(select(&mut tape, f, pos, feature)?);
                break;
            }
        }
        features.push((GraphSite::Mlp, l, f));
        let out = write(&mut tape, m, f, &s, error_rows(GraphSite::Mlp, l)?)?;
        resid = tape.add(mid, out)?;
    }
    let root_var = match (root_var, graph.root_spec) {
        (Some(v), _) => v,
        (None, RootSpec::Logit { pos, token }) => {
            let g = tape.constant(model.lnf_g.clone());
            let b = tape.constant(model.lnf_b.clone());
            let ln = tape.frozen_layer_norm(resid, g, b, cache.lnf_rstd[..n].to_vec())?;
            let w_u = tape.constant(model.w_u.clone());
            let logits = tape.matmul(ln, w_u)?;
            select(&mut tape, logits, pos, token)?
        }
        (None, spec) => return Err(Error::UnreachableRoot(format!("{spec} not reached in replay"))),
    };
    let grads = tape.backward(root_var)?;
    let dense: Vec<(GraphSite, usize, Tensor)> = features.iter().map(|&(s, l, v)| (s, l, grads.get(v))).collect();
    Ok(graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            if i == graph.root {
                return Some(1.0);
            }
            let id = node.id;
            if !matches!(id.kind, NodeKind::EmbedFeature | NodeKind::AttnFeature | NodeKind::TranscoderFeature) {
                return None;
            }
            dense
                .iter()
                .find(|(s, l, _)| *s == id.site && *l == id.layer)
                .map(|(_, _, g)| g.row(id.pos)[id.feature.expect("feature index")] as f64)
        })
        .collect())
}
