// SPDX-License-Identifier: MIT OR Apache-2.0

//! Splits residual streams into dictionary features, error terms and the
//! positional embedding.

use super::{GraphSite, NodeId, NodeKind};
use crate::dictionary::{DictionaryModule, DictionarySet, HookSpec};
use crate::numerics::Tensor;
use crate::toymodel::{ActivationCache, Transformer};
use crate::{Error, Result};

/// A point where the residual stream is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadSite {
    PreAttn(usize),
    PreMlp(usize),
    Final,
}

impl ReadSite {
    /// Writers with a stage below this one are visible here.
    pub fn stage(self, n_layers: usize) -> usize {
        match self {
            ReadSite::PreAttn(l) => 1 + 2 * l,
            ReadSite::PreMlp(l) => 2 + 2 * l,
            ReadSite::Final => 1 + 2 * n_layers,
        }
    }

    pub fn at_stage(stage: usize, n_layers: usize) -> Self {
        if stage > 2 * n_layers {
            ReadSite::Final
        } else if stage % 2 == 1 {
            ReadSite::PreAttn(stage / 2)
        } else {
            ReadSite::PreMlp(stage / 2 - 1)
        }
    }
}

/// One additive term of a residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Writer {
    pub node: NodeId,
    /// Feature activation, or 1 for error and positional terms.
    pub activation: f64,
    /// Decoder column for features; the whole vector otherwise.
    pub basis: Vec<f64>,
    /// Residual write is `activation * factor * basis`. For features this
    /// is the dictionary scaler over the token's input normalisation factor.
    pub factor: f64,
}

impl Writer {
    pub fn vector(&self) -> Vec<f64> {
        let c = self.activation * self.factor;
        self.basis.iter().map(|v| v * c).collect()
    }

    pub fn is_feature(&self) -> bool {
        matches!(
            self.node.kind,
            NodeKind::EmbedFeature | NodeKind::AttnFeature | NodeKind::TranscoderFeature
        )
    }
}

/// Every residual writer of a cached forward pass, per position.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub n_layers: usize,
    /// Writers per position, in stage order.
    pub writers: Vec<Vec<Writer>>,
    /// Feature activations `[positions, d_sae]` of each dictionary used.
    pub codes: Vec<(HookSpec, Tensor)>,
    /// Input normalisation factor per position of each dictionary used.
    pub scales: Vec<(HookSpec, Vec<f32>)>,
}

/// The dictionaries writing at stages below `upto`, in stage order.
pub(crate) fn upstream_hooks(n_layers: usize, upto: ReadSite) -> Vec<(GraphSite, usize)> {
    let limit = upto.stage(n_layers);
    let mut out = vec![(GraphSite::Embed, 0)];
    for l in 0..n_layers {
        for site in [GraphSite::Attn, GraphSite::Mlp] {
            if site.stage(l, n_layers) < limit {
                out.push((site, l));
            }
        }
    }
    out
}

/// Runs `module` on its cached input for the first `n` positions. Returns
/// `(codes, scales)`.
pub(crate) fn module_codes(module: &DictionaryModule, cache: &ActivationCache, n: usize) -> Result<(Tensor, Vec<f32>)> {
    let x = cache.hook(module.hook.input_point());
    let d = x.shape()[1];
    let rows = Tensor::new(vec![n, d], x.data()[..n * d].to_vec())?;
    let (out, s) = module.forward_raw(&rows)?;
    Ok((out.f, s))
}

pub(crate) fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

impl Decomposition {
    /// Decomposes positions `0..n_positions` for every writer visible at
    /// `upto`.
    pub fn new(
        model: &Transformer,
        cache: &ActivationCache,
        dicts: &DictionarySet,
        upto: ReadSite,
        n_positions: usize,
    ) -> Result<Self> {
        let n_layers = model.config.n_layers;
        let t = cache.seq_len();
        if n_positions == 0 || n_positions > t {
            return Err(Error::InvalidInput(format!("{n_positions} positions requested from a cache of {t}")));
        }
        if let ReadSite::PreAttn(l) | ReadSite::PreMlp(l) = upto {
            if l >= n_layers {
                return Err(Error::InvalidInput(format!("layer {l} out of range")));
            }
        }
        let mut writers: Vec<Vec<Writer>> = (0..n_positions).map(|_| Vec::new()).collect();
        let mut codes = Vec::new();
        let mut scales = Vec::new();
        for (site, layer) in upstream_hooks(n_layers, upto) {
            let hook = site.hook(layer).expect("writing site");
            let module = dicts.require(hook)?;
            let (f, s) = module_codes(module, cache, n_positions)?;
            let actual = cache.hook(module.hook.label_point());
            let scalers = module.scalers();
            let ds = module.d_sae();
            let mut columns: Vec<Option<Vec<f64>>> = vec![None; ds];
            for (j, ws) in writers.iter_mut().enumerate() {
                let mut err = to_f64(actual.row(j));
                for (p, &a) in f.row(j).iter().enumerate() {
                    if a <= 0.0 {
                        continue;
                    }
                    let col = columns[p].get_or_insert_with(|| to_f64(&module.decoder_column(p))).clone();
                    let w = Writer {
                        node: NodeId::feature(site, layer, p, j),
                        activation: a as f64,
                        factor: scalers[p] as f64 / s[j] as f64,
                        basis: col,
                    };
                    for (e, v) in err.iter_mut().zip(w.vector()) {
                        *e -= v;
                    }
                    ws.push(w);
                }
                ws.push(Writer {
                    node: NodeId::error(site, layer, j),
                    activation: 1.0,
                    basis: err,
                    factor: 1.0,
                });
                if site == GraphSite::Embed {
                    ws.push(Writer {
                        node: NodeId::pos_embed(j),
                        activation: 1.0,
                        basis: to_f64(cache.pos_embed.row(j)),
                        factor: 1.0,
                    });
                }
            }
            codes.push((hook, f));
            scales.push((hook, s));
        }
        Ok(Decomposition {
            n_layers,
            writers,
            codes,
            scales,
        })
    }

    /// The writers visible at `site` of position `pos`.
    pub fn parts(&self, pos: usize, site: ReadSite) -> impl Iterator<Item = &Writer> {
        let limit = site.stage(self.n_layers);
        let n = self.n_layers;
        self.writers[pos].iter().filter(move |w| w.node.stage(n) < limit)
    }

    pub fn codes(&self, hook: HookSpec) -> Option<&Tensor> {
        self.codes.iter().find(|(h, _)| *h == hook).map(|(_, t)| t)
    }

    pub fn scales(&self, hook: HookSpec) -> Option<&[f32]> {
        self.scales.iter().find(|(h, _)| *h == hook).map(|(_, s)| s.as_slice())
    }

    /// Sum of the writers visible at `site` of position `pos`.
    pub fn residual(&self, pos: usize, site: ReadSite) -> Vec<f64> {
        let mut x = vec![0.0; self.writers[pos].first().map_or(0, |w| w.basis.len())];
        for w in self.parts(pos, site) {
            let c = w.activation * w.factor;
            for (a, b) in x.iter_mut().zip(&w.basis) {
                *a += c * b;
            }
        }
        x
    }
}

/// The terms making up the residual stream read at `site` of position `pos`:
/// embedding features, one error per upstream dictionary, the positional
/// embedding, and every active upstream attention and transcoder feature.
pub fn decompose_residual(
    model: &Transformer,
    cache: &ActivationCache,
    dicts: &DictionarySet,
    pos: usize,
    site: ReadSite,
) -> Result<Vec<Writer>> {
    if pos >= cache.seq_len() {
        return Err(Error::InvalidInput(format!("position {pos} out of range")));
    }
    let d = Decomposition::new(model, cache, dicts, site, pos + 1)?;
    Ok(d.parts(pos, site).cloned().collect())
}
