// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy transformer: parameters, checkpoints, and a hookable inference
//! runner that can record an [`ActivationCache`].

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::vocab::Vocabulary;
use crate::numerics::kernels::{self, layer_norm};
use crate::numerics::seeds::substream;
use crate::numerics::{Tensor, TensorArchive};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// `[d_model, n_heads * d_head]`, head-major columns.
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// `[n_heads * d_head, d_model]`.
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_g", "ln2_b", "w_in",
    "b_in", "w_out", "b_out",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v,
            &self.w_o, &self.b_o, &self.ln2_g, &self.ln2_b, &self.w_in, &self.b_in, &self.w_out,
            &self.b_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_q, &mut self.b_q, &mut self.w_k,
            &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w_in, &mut self.b_in, &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Pre-LN decoder-only transformer with learned positional embeddings and an
/// untied, bias-free unembedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    /// `[vocab, d_model]`.
    pub w_tok: Tensor,
    /// `[max_seq_len, d_model]`.
    pub w_pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// `[d_model, vocab]`.
    pub w_u: Tensor,
}

/// Points in the forward pass where activations can be read or replaced.
/// All hooked tensors are `[rows, d_model]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HookPoint {
    /// Token embedding, before the positional embedding is added.
    Embed,
    ResidPre(usize),
    AttnOut(usize),
    ResidMid(usize),
    MlpOut(usize),
    ResidFinal,
}

/// Hook callback: may inspect or overwrite the activation in place.
pub type HookFn<'a> = dyn FnMut(HookPoint, &mut Tensor) -> Result<()> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub resid_pre: Tensor,
    pub attn_out: Tensor,
    pub resid_mid: Tensor,
    pub mlp_out: Tensor,
    pub ln1_rstd: Vec<f32>,
    pub ln2_rstd: Vec<f32>,
    /// Scaled pre-softmax scores `[n_heads, T, T]`; entries above the
    /// diagonal are computed but masked out of the softmax.
    pub scores: Tensor,
    /// Post-softmax causal patterns `[n_heads, T, T]`.
    pub patterns: Tensor,
}

/// Every activation of one single-sequence forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<usize>,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerCache>,
    pub resid_final: Tensor,
    pub lnf_rstd: Vec<f32>,
    pub logits: Tensor,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn hook(&self, point: HookPoint) -> &Tensor {
        match point {
            HookPoint::Embed => &self.tok_embed,
            HookPoint::ResidPre(l) => &self.layers[l].resid_pre,
            HookPoint::AttnOut(l) => &self.layers[l].attn_out,
            HookPoint::ResidMid(l) => &self.layers[l].resid_mid,
            HookPoint::MlpOut(l) => &self.layers[l].mlp_out,
            HookPoint::ResidFinal => &self.resid_final,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

fn add_row_in_place(x: &mut Tensor, row: &Tensor) {
    let d = row.numel();
    for chunk in x.data_mut().chunks_mut(d) {
        for (o, &b) in chunk.iter_mut().zip(row.data()) {
            *o += b;
        }
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = kernels::matmul(x, w)?;
    add_row_in_place(&mut y, b);
    Ok(y)
}

impl Transformer {
    /// Random initialisation from the `model-init` substream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "model-init");
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let mut draw = |shape: &[usize], scale: f32| Tensor::from_fn(shape, |_| normal.sample(&mut rng) * scale);
        let (d, hd, m, v) = (config.d_model, config.n_heads * config.d_head, config.d_mlp, config.vocab_size);
        let resid_scale = 1.0 / ((2 * config.n_layers) as f32).sqrt();
        let w_tok = draw(&[v, d], 1.0);
        let w_pos = draw(&[config.max_seq_len, d], 0.5);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_q: draw(&[d, hd], 1.0),
                b_q: Tensor::zeros(&[hd]),
                w_k: draw(&[d, hd], 1.0),
                b_k: Tensor::zeros(&[hd]),
                w_v: draw(&[d, hd], 1.0),
                b_v: Tensor::zeros(&[hd]),
                w_o: draw(&[hd, d], resid_scale),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_in: draw(&[d, m], 1.0),
                b_in: Tensor::zeros(&[m]),
                w_out: draw(&[m, d], resid_scale),
                b_out: Tensor::zeros(&[d]),
            })
            .collect();
        let w_u = draw(&[d, v], 1.0);
        Ok(Transformer {
            config: config.clone(),
            w_tok,
            w_pos,
            layers,
            lnf_g: Tensor::full(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            w_u,
        })
    }

    /// Parameters in a fixed canonical order with their archive names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_tok".to_string(), &self.w_tok), ("w_pos".to_string(), &self.w_pos)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.fields()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_u".into(), &self.w_u));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_tok, &mut self.w_pos];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_u);
        out
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (name, t) in self.named_params() {
            a.push(name, t.clone());
        }
        a
    }

    pub fn from_archive(config: &ModelConfig, archive: &TensorArchive) -> Result<Self> {
        let mut model = Transformer::init(config, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = archive.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: archive shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    /// Writes `path` (tensor archive) and `path.json` (config + vocabulary).
    pub fn save(&self, path: &Path, vocabulary: &Vocabulary, meta: serde_json::Value) -> Result<()> {
        self.to_archive().save(path)?;
        let sidecar = ModelSidecar {
            schema_version: MODEL_SCHEMA_VERSION,
            config: self.config.clone(),
            vocabulary: vocabulary.clone(),
            meta,
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelSidecar)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut sidecar: ModelSidecar = serde_json::from_str(&text)?;
        if sidecar.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported model schema {}", sidecar.schema_version)));
        }
        sidecar.vocabulary = sidecar.vocabulary.reindex()?;
        let archive = TensorArchive::load(path)?;
        Ok((Transformer::from_archive(&sidecar.config, &archive)?, sidecar))
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if seq == 0 || seq > self.config.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if tokens.len() != batch * seq {
            return Err(Error::shape("forward", format!("{} tokens for {batch}x{seq}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} >= vocab size")));
        }
        Ok(())
    }

    /// Batched forward over `batch` sequences of equal length `seq`
    /// (`tokens` is row-major `[batch, seq]`). Returns logits `[batch*seq, vocab]`.
    pub fn forward_batch(&self, tokens: &[usize], batch: usize, seq: usize, hook: Option<&mut HookFn>) -> Result<Tensor> {
        self.run(tokens, batch, seq, hook, None)
    }

    /// Plain forward of one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.run(tokens, 1, tokens.len(), None, None)
    }

    /// Forward of one sequence recording every activation.
    pub fn forward_with_cache(&self, tokens: &[usize]) -> Result<(Tensor, ActivationCache)> {
        let mut cache = None;
        let logits = self.run(tokens, 1, tokens.len(), None, Some(&mut cache))?;
        Ok((logits, cache.expect("cache recorded")))
    }

    fn run(
        &self,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mut hook: Option<&mut HookFn>,
        cache: Option<&mut Option<ActivationCache>>,
    ) -> Result<Tensor> {
        self.check_tokens(tokens, batch, seq)?;
        let c = &self.config;
        let (d, h, dh) = (c.d_model, c.n_heads, c.d_head);
        let rows = batch * seq;
        let record = cache.is_some();
        let mut call = |p: HookPoint, x: &mut Tensor| -> Result<()> {
            match hook.as_mut() {
                Some(f) => f(p, x),
                None => Ok(()),
            }
        };

        let mut tok = Tensor::zeros(&[rows, d]);
        for (r, &t) in tokens.iter().enumerate() {
            tok.row_mut(r).copy_from_slice(self.w_tok.row(t));
        }
        call(HookPoint::Embed, &mut tok)?;
        let mut pos = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            pos.row_mut(r).copy_from_slice(self.w_pos.row(r % seq));
        }
        let mut resid = tok.clone();
        for (o, &p) in resid.data_mut().iter_mut().zip(pos.data()) {
            *o += p;
        }

        let scale = 1.0 / (dh as f32).sqrt();
        let mut layer_caches = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            call(HookPoint::ResidPre(l), &mut resid)?;
            let (ln1, _, ln1_rstd) = layer_norm(&resid, p.ln1_g.data(), p.ln1_b.data())?;
            let q = kernels::split_heads(&affine(&ln1, &p.w_q, &p.b_q)?, batch, seq, h)?;
            let k = kernels::split_heads(&affine(&ln1, &p.w_k, &p.b_k)?, batch, seq, h)?;
            let v = kernels::split_heads(&affine(&ln1, &p.w_v, &p.b_v)?, batch, seq, h)?;
            let mut scores = kernels::bmm(&q, &k, true)?;
            scores.data_mut().iter_mut().for_each(|s| *s *= scale);
            let patterns = kernels::causal_softmax(&scores)?;
            let z = kernels::merge_heads(&kernels::bmm(&patterns, &v, false)?, batch, seq, h)?;
            let mut attn = affine(&z, &p.w_o, &p.b_o)?;
            call(HookPoint::AttnOut(l), &mut attn)?;
            let mut mid = resid.clone();
            for (o, &a) in mid.data_mut().iter_mut().zip(attn.data()) {
                *o += a;
            }
            call(HookPoint::ResidMid(l), &mut mid)?;
            let (ln2, _, ln2_rstd) = layer_norm(&mid, p.ln2_g.data(), p.ln2_b.data())?;
            let mut hidden = affine(&ln2, &p.w_in, &p.b_in)?;
            hidden.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
            let mut mlp = affine(&hidden, &p.w_out, &p.b_out)?;
            call(HookPoint::MlpOut(l), &mut mlp)?;
            let mut next = mid.clone();
            for (o, &m) in next.data_mut().iter_mut().zip(mlp.data()) {
                *o += m;
            }
            if record {
                layer_caches.push(LayerCache {
                    resid_pre: resid.clone(),
                    attn_out: attn,
                    resid_mid: mid,
                    mlp_out: mlp,
                    ln1_rstd,
                    ln2_rstd,
                    scores,
                    patterns,
                });
            }
            resid = next;
        }
        call(HookPoint::ResidFinal, &mut resid)?;
        let (lnf, _, lnf_rstd) = layer_norm(&resid, self.lnf_g.data(), self.lnf_b.data())?;
        let logits = kernels::matmul(&lnf, &self.w_u)?;
        logits.check_finite("forward logits")?;
        if let Some(slot) = cache {
            *slot = Some(ActivationCache {
                tokens: tokens.to_vec(),
                tok_embed: tok,
                pos_embed: pos,
                layers: layer_caches,
                resid_final: resid,
                lnf_rstd,
                logits: logits.clone(),
            });
        }
        Ok(logits)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Right-pads sequences to a common length. Returns the flat token matrix,
/// the padded length, and a validity mask per position.
pub fn pad_batch(seqs: &[&[usize]], pad: usize) -> (Vec<usize>, usize, Vec<bool>) {
    let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(seqs.len() * seq);
    let mut mask = Vec::with_capacity(seqs.len() * seq);
    for s in seqs {
        tokens.extend_from_slice(s);
        mask.extend(std::iter::repeat_n(true, s.len()));
        tokens.extend(std::iter::repeat_n(pad, seq - s.len()));
        mask.extend(std::iter::repeat_n(false, seq - s.len()));
    }
    (tokens, seq, mask)
}
