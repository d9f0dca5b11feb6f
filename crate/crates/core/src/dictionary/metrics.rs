// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature statistics, pruning and dictionary quality metrics.

use serde::{Deserialize, Serialize};

use super::harvest::harvest;
use super::{row_scales, scale_rows, DictKind, DictionaryModule};
use crate::numerics::{kernels, Tensor};
use crate::toymodel::train::batch_targets;
use crate::toymodel::{HookPoint, TokenSequence, Transformer};
use crate::{Error, Result};

/// Per-feature activation statistics over a token stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub tokens: u64,
    pub max_act: Vec<f32>,
    pub fire_count: Vec<u64>,
}

impl FeatureStats {
    pub fn new(d_sae: usize) -> Self {
        FeatureStats {
            tokens: 0,
            max_act: vec![0.0; d_sae],
            fire_count: vec![0; d_sae],
        }
    }

    pub fn update(&mut self, f: &Tensor) {
        let (rows, ds) = f.dims2();
        for row in f.data().chunks(ds) {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    self.fire_count[j] += 1;
                }
                if v > self.max_act[j] {
                    self.max_act[j] = v;
                }
            }
        }
        self.tokens += rows as u64;
    }

    pub fn frequency(&self, j: usize) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.fire_count[j] as f64 / self.tokens as f64
        }
    }
}

const SEQS_PER_FORWARD: usize = 64;

/// Activation statistics of each module over `seqs`, sharing model forwards.
pub fn collect_feature_stats(model: &Transformer, modules: &[&DictionaryModule], seqs: &[TokenSequence], pad: usize) -> Result<Vec<FeatureStats>> {
    let points: Vec<HookPoint> = modules.iter().map(|m| m.hook.input_point()).collect();
    let mut stats: Vec<FeatureStats> = modules.iter().map(|m| FeatureStats::new(m.d_sae())).collect();
    for chunk in seqs.chunks(SEQS_PER_FORWARD) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let acts = harvest(model, &refs, &points, pad)?;
        for ((m, st), x) in modules.iter().zip(stats.iter_mut()).zip(&acts.data) {
            let s = row_scales(x)?;
            st.update(&m.encode(&scale_rows(x, &s))?);
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneThresholds {
    pub min_norm: f32,
    pub min_max_act: f32,
    pub min_frequency: f64,
}

impl Default for PruneThresholds {
    fn default() -> Self {
        PruneThresholds {
            min_norm: 0.99,
            min_max_act: 1.0,
            min_frequency: 1e-6,
        }
    }
}

/// The alive mask implied by `stats` and the current decoder norms.
pub fn prune_mask(module: &DictionaryModule, stats: &FeatureStats, t: &PruneThresholds) -> Vec<bool> {
    let norms = module.decoder_norms();
    (0..module.d_sae())
        .map(|j| norms[j] >= t.min_norm && stats.max_act[j] >= t.min_max_act && stats.frequency(j) >= t.min_frequency)
        .collect()
}

/// Stores `stats` in the module and prunes every feature failing a
/// threshold.
pub fn prune_features(module: &DictionaryModule, stats: Option<&FeatureStats>, t: &PruneThresholds) -> Result<DictionaryModule> {
    let stats = stats
        .or(module.stats.as_ref())
        .ok_or_else(|| Error::MissingStatistics(module.hook.to_string()))?;
    if stats.max_act.len() != module.d_sae() || stats.tokens == 0 {
        return Err(Error::MissingStatistics(format!("{}: statistics do not cover the dictionary", module.hook)));
    }
    let mut m = module.clone();
    m.alive = prune_mask(module, stats, t);
    m.stats = Some(stats.clone());
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMetrics {
    pub l0: f64,
    pub explained_variance: f64,
    pub original_ce_loss: f64,
    pub reconstruction_ce_loss: f64,
    pub ablated_ce_loss: f64,
    pub reconstruction_ce_score: f64,
    pub tokens: usize,
    pub max_act: Vec<f32>,
    pub frequency: Vec<f64>,
}

/// `1 - sum ||y_hat - y||^2 / sum ||y - mean(y)||^2` over rows.
pub fn explained_variance(label: &Tensor, recon: &Tensor) -> f64 {
    let (r, d) = label.dims2();
    let mut mean = vec![0f64; d];
    for i in 0..r {
        for (m, &v) in mean.iter_mut().zip(label.row(i)) {
            *m += v as f64 / r as f64;
        }
    }
    let mut err = 0.0;
    let mut var = 0.0;
    for i in 0..r {
        for j in 0..d {
            let y = label.row(i)[j] as f64;
            err += (recon.row(i)[j] as f64 - y).powi(2);
            var += (y - mean[j]).powi(2);
        }
    }
    1.0 - err / var
}

/// `(L_recons - L_ablate) / (L_original - L_ablate)`.
pub fn ce_score(original: f64, recon: f64, ablated: f64) -> f64 {
    (recon - ablated) / (original - ablated)
}

/// How a hook activation is replaced during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    None,
    Reconstruction,
    Zero,
}

/// Mean next-token cross-entropy of `seqs` with the module's label activation
/// replaced as requested.
pub fn replaced_ce_loss(model: &Transformer, module: &DictionaryModule, seqs: &[TokenSequence], pad: usize, how: Replacement) -> Result<f64> {
    let mut total = 0.0f64;
    let mut weight = 0.0f64;
    for chunk in seqs.chunks(SEQS_PER_FORWARD) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let (tokens, seq, targets, weights) = batch_targets(&refs, pad);
        let hook_in = module.hook.input_point();
        let hook_out = module.hook.label_point();
        let mut saved: Option<Tensor> = None;
        let mut hook = |p: HookPoint, x: &mut Tensor| -> Result<()> {
            if how == Replacement::Reconstruction && p == hook_in && hook_in != hook_out {
                saved = Some(x.clone());
            }
            if p == hook_out {
                match how {
                    Replacement::None => {}
                    Replacement::Zero => x.data_mut().iter_mut().for_each(|v| *v = 0.0),
                    Replacement::Reconstruction => {
                        let input = saved.take().unwrap_or_else(|| x.clone());
                        let (out, _) = module.forward_raw(&input)?;
                        *x = out.recon;
                    }
                }
            }
            Ok(())
        };
        let logits = model.forward_batch(&tokens, refs.len(), seq, Some(&mut hook))?;
        let w: f64 = weights.iter().map(|&v| v as f64).sum();
        if w == 0.0 {
            continue;
        }
        let (loss, _) = kernels::cross_entropy(&logits, &targets, &weights)?;
        total += loss * w;
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::InvalidInput("evaluation corpus has no targets".into()));
    }
    Ok(total / weight)
}

/// L0, explained variance (normalised coordinates) and reconstruction CE
/// score on a held-out corpus.
pub fn evaluate_dictionary(model: &Transformer, module: &DictionaryModule, seqs: &[TokenSequence], pad: usize) -> Result<DictionaryMetrics> {
    let points = vec![module.hook.input_point(), module.hook.label_point()];
    let mut stats = FeatureStats::new(module.d_sae());
    let mut labels = Vec::new();
    let mut recons = Vec::new();
    let mut rows = 0usize;
    for chunk in seqs.chunks(SEQS_PER_FORWARD) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let acts = harvest(model, &refs, &points, pad)?;
        let s = row_scales(&acts.data[0])?;
        let x = scale_rows(&acts.data[0], &s);
        let y = if module.kind == DictKind::Transcoder { scale_rows(&acts.data[1], &s) } else { x.clone() };
        let out = module.forward_normed(&x)?;
        stats.update(&out.f);
        rows += x.shape()[0];
        labels.extend_from_slice(y.data());
        recons.extend_from_slice(out.recon.data());
    }
    if rows == 0 {
        return Err(Error::InvalidInput("empty evaluation corpus".into()));
    }
    let d = module.d_model();
    let label = Tensor::new(vec![rows, d], labels)?;
    let recon = Tensor::new(vec![rows, d], recons)?;
    let ev = explained_variance(&label, &recon);
    let l0 = stats.fire_count.iter().sum::<u64>() as f64 / rows as f64;
    let original = replaced_ce_loss(model, module, seqs, pad, Replacement::None)?;
    let reconstruction = replaced_ce_loss(model, module, seqs, pad, Replacement::Reconstruction)?;
    let ablated = replaced_ce_loss(model, module, seqs, pad, Replacement::Zero)?;
    Ok(DictionaryMetrics {
        l0,
        explained_variance: ev,
        original_ce_loss: original,
        reconstruction_ce_loss: reconstruction,
        ablated_ce_loss: ablated,
        reconstruction_ce_score: ce_score(original, reconstruction, ablated),
        tokens: rows,
        frequency: (0..module.d_sae()).map(|j| stats.frequency(j)).collect(),
        max_act: stats.max_act,
    })
}
