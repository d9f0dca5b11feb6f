// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training of the toy transformer on the tape.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::corpus::TokenSequence;
use super::model::{pad_batch, Transformer};
use crate::numerics::seeds::substream;
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub final_lr_frac: f32,
    pub grad_clip: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub log_every: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            final_lr_frac: 0.1,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            log_every: 100,
        }
    }
}

impl LmTrainConfig {
    /// Linear warmup then cosine decay to `final_lr_frac * lr`.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f32;
        let t = ((step - self.warmup) as f32 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Training loss at every step.
    pub losses: Vec<f64>,
}

/// Records the model's forward pass on `tape`. Returns the logits variable
/// and the parameter leaves in [`Transformer::named_params`] order.
pub fn tape_forward(model: &Transformer, tape: &mut Tape, tokens: &[usize], batch: usize, seq: usize) -> Result<(Var, Vec<Var>)> {
    let c = &model.config;
    if seq == 0 || seq > c.max_seq_len || tokens.len() != batch * seq {
        return Err(Error::InvalidInput(format!("bad batch {batch}x{seq} for {} tokens", tokens.len())));
    }
    let params: Vec<Var> = model.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let (w_tok, w_pos) = (params[0], params[1]);
    let pos_ids: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
    let tok = tape.embedding(w_tok, tokens)?;
    let pos = tape.embedding(w_pos, &pos_ids)?;
    let mut resid = tape.add(tok, pos)?;
    let scale = 1.0 / (c.d_head as f32).sqrt();
    for l in 0..c.n_layers {
        let p = &params[2 + 16 * l..2 + 16 * (l + 1)];
        let ln1 = tape.layer_norm(resid, p[0], p[1])?;
        let proj = |w: Var, b: Var, t: &mut Tape| -> Result<Var> {
            let y = t.matmul(ln1, w)?;
            let y = t.add_row(y, b)?;
            t.split_heads(y, batch, seq, c.n_heads)
        };
        let q = proj(p[2], p[3], tape)?;
        let k = proj(p[4], p[5], tape)?;
        let v = proj(p[6], p[7], tape)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let pattern = tape.causal_softmax(scores)?;
        let z = tape.bmm(pattern, v, false)?;
        let z = tape.merge_heads(z, batch, seq, c.n_heads)?;
        let attn = tape.matmul(z, p[8])?;
        let attn = tape.add_row(attn, p[9])?;
        let mid = tape.add(resid, attn)?;
        let ln2 = tape.layer_norm(mid, p[10], p[11])?;
        let hid = tape.matmul(ln2, p[12])?;
        let hid = tape.add_row(hid, p[13])?;
        let hid = tape.gelu(hid)?;
        let mlp = tape.matmul(hid, p[14])?;
        let mlp = tape.add_row(mlp, p[15])?;
        resid = tape.add(mid, mlp)?;
    }
    let n = params.len();
    let lnf = tape.layer_norm(resid, params[n - 3], params[n - 2])?;
    let logits = tape.matmul(lnf, params[n - 1])?;
    Ok((logits, params))
}

/// Flat tokens, targets and loss weights for a padded batch.
pub fn batch_targets(seqs: &[&TokenSequence], pad: usize) -> (Vec<usize>, usize, Vec<usize>, Vec<f32>) {
    let token_refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let (tokens, seq, _) = pad_batch(&token_refs, pad);
    let mut targets = vec![0usize; tokens.len()];
    let mut weights = vec![0f32; tokens.len()];
    for (b, s) in seqs.iter().enumerate() {
        for (p, t) in s.targets().into_iter().enumerate() {
            if let Some(t) = t {
                targets[b * seq + p] = t;
                weights[b * seq + p] = 1.0;
            }
        }
    }
    (tokens, seq, targets, weights)
}

/// Loss of one batch and the gradients of every parameter.
pub fn loss_and_grads(model: &Transformer, seqs: &[&TokenSequence], pad: usize) -> Result<(f64, Vec<Tensor>)> {
    let (tokens, seq, targets, weights) = batch_targets(seqs, pad);
    let mut tape = Tape::new();
    let (logits, params) = tape_forward(model, &mut tape, &tokens, seqs.len(), seq)?;
    let loss = tape.cross_entropy(logits, &targets, &weights)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    Ok((value, params.into_iter().map(|v| grads.take(v)).collect()))
}

/// Trains a freshly initialised model on `corpus`. Batches are drawn with
/// replacement from the `data/lm-batches` substream.
pub fn train_lm(config: &ModelConfig, corpus: &[TokenSequence], params: &LmTrainConfig, pad: usize, seed: u64) -> Result<(Transformer, LmTrainReport)> {
    train_lm_with_progress(config, corpus, params, pad, seed, |_, _| {})
}

pub fn train_lm_with_progress(
    config: &ModelConfig,
    corpus: &[TokenSequence],
    params: &LmTrainConfig,
    pad: usize,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Transformer, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    for s in corpus {
        s.validate(config.vocab_size, config.max_seq_len)?;
    }
    let mut model = Transformer::init(config, seed)?;
    let adam_cfg = AdamConfig {
        lr: params.lr,
        beta1: params.beta1,
        beta2: params.beta2,
        eps: 1e-8,
    };
    let mut adam = AdamState::new(adam_cfg, model.named_params().into_iter().map(|(_, t)| t));
    let mut rng = substream(seed, "data/lm-batches");
    let mut report = LmTrainReport::default();
    for step in 0..params.steps {
        let batch: Vec<&TokenSequence> = (0..params.batch_size).map(|_| corpus.choose(&mut rng).unwrap()).collect();
        let (loss, mut grads) = match loss_and_grads(&model, &batch, pad) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                    detail: format!("non-finite value in {what}"),
                });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss,
                detail: "non-finite loss".into(),
            });
        }
        clip_global_norm(&mut grads, params.grad_clip);
        let mut ps = model.params_mut();
        adam.step_with_lr(&mut ps, &grads, params.lr_at(step))?;
        report.losses.push(loss);
        if params.log_every > 0 && step % params.log_every == 0 {
            progress(step, loss);
        }
    }
    Ok((model, report))
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Answer-position accuracy and mean cross-entropy over sequences that
/// carry an answer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerEval {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

pub fn evaluate_answers(model: &Transformer, seqs: &[TokenSequence]) -> Result<AnswerEval> {
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for s in seqs {
        let (Some(p), Some(a)) = (s.answer_pos, s.answer_token) else {
            continue;
        };
        let logits = model.forward(&s.tokens)?;
        let row = logits.row(p);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let argmax = row.iter().position(|&x| x == max).unwrap();
        let lse = max as f64 + row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln();
        loss += lse - row[a] as f64;
        correct += usize::from(argmax == a);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no sequences with answers".into()));
    }
    Ok(AnswerEval {
        accuracy: correct as f64 / count as f64,
        loss: loss / count as f64,
        count,
    })
}

/// Cross-entropy of an add-one smoothed bigram model fit on `train`,
/// measured at the answer positions of `heldout`.
pub fn bigram_baseline_loss(train: &[TokenSequence], heldout: &[TokenSequence], vocab_size: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab_size * vocab_size];
    for s in train {
        for (p, t) in s.targets().into_iter().enumerate() {
            if let Some(t) = t {
                counts[s.tokens[p] * vocab_size + t] += 1.0;
            }
        }
    }
    let mut loss = 0.0;
    let mut n = 0usize;
    for s in heldout {
        if let (Some(p), Some(a)) = (s.answer_pos, s.answer_token) {
            let row = &counts[s.tokens[p] * vocab_size..(s.tokens[p] + 1) * vocab_size];
            loss -= (row[a] / row.iter().sum::<f64>()).ln();
            n += 1;
        }
    }
    loss / n.max(1) as f64
}
