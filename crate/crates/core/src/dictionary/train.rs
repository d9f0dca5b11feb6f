// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dictionary losses, training, dead-feature resampling and decoder
//! finetuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::harvest::{ActivationStream, ShuffleBuffer};
use super::{row_scales, scale_rows, DictKind, DictionaryModule, HookSpec, Site};
use crate::numerics::seeds::substream;
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::toymodel::{HookPoint, TokenSequence, Transformer};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictTrainConfig {
    pub lambda: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub token_budget: usize,
    pub buffer_size: usize,
    pub expansion_factor: usize,
    pub seed: u64,
    /// Resample features silent for this many steps; 0 disables resampling.
    #[serde(default)]
    pub resample_every: usize,
    /// Number of sequences per model forward when filling the buffer.
    #[serde(default = "default_seqs_per_chunk")]
    pub seqs_per_chunk: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_seqs_per_chunk() -> usize {
    64
}

fn default_log_every() -> usize {
    100
}

impl DictTrainConfig {
    /// Defaults for a site: lambda 8e-5, or 1.2e-4 for attention outputs;
    /// Adam lr 4e-4 with betas (0, 0.9999); 8x expansion.
    pub fn for_site(site: Site) -> Self {
        let adam = AdamConfig::default();
        DictTrainConfig {
            lambda: if site == Site::AttnOut { 1.2e-4 } else { 8e-5 },
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch_size: 256,
            token_budget: 500_000,
            buffer_size: 16_384,
            expansion_factor: 8,
            seed: 0,
            resample_every: 0,
            seqs_per_chunk: default_seqs_per_chunk(),
            log_every: default_log_every(),
        }
    }

    /// Settings for the toy model's token budget: 50x the site lambda, lr 1e-3
    /// and 300k tokens. The site defaults leave L0 in the hundreds at this
    /// budget.
    pub fn toy(site: Site) -> Self {
        let base = DictTrainConfig::for_site(site);
        DictTrainConfig {
            lambda: base.lambda * 50.0,
            lr: 1e-3,
            token_budget: 300_000,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.token_budget == 0 || self.buffer_size < self.batch_size || self.expansion_factor == 0 {
            return Err(Error::InvalidInput(format!("dictionary budgets must be positive: {self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// The two loss terms, averaged over rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `mean_rows ||y - y_hat||^2 / ||y - mean(y)||^2`.
    pub mse: f64,
    /// `lambda * mean_rows ||f||_1`.
    pub l1: f64,
    pub total: f64,
}

/// Reciprocal of each row's centred squared norm, divided by the row count.
fn inverse_variance_weights(label: &Tensor) -> Result<Vec<f32>> {
    let (r, d) = label.dims2();
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = label.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
        if var == 0.0 {
            return Err(Error::InvalidInput("zero-variance label row (degenerate batch)".into()));
        }
        out.push((1.0 / (var * r as f64)) as f32);
    }
    Ok(out)
}

/// Loss on normalised rows `x` with label `label` (equal to `x` for an SAE).
pub fn dictionary_loss(module: &DictionaryModule, x: &Tensor, label: &Tensor) -> Result<LossParts> {
    if x.shape() != label.shape() {
        return Err(Error::shape("dictionary_loss", format!("{:?} vs {:?}", x.shape(), label.shape())));
    }
    let w = inverse_variance_weights(label)?;
    let out = module.forward_normed(x)?;
    let (r, _) = x.dims2();
    let mut mse = 0.0f64;
    for i in 0..r {
        let se: f64 = out.recon.row(i).iter().zip(label.row(i)).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        mse += se * w[i] as f64;
    }
    let l1 = module.lambda as f64 * out.f.sum_f64() / r as f64;
    Ok(LossParts { mse, l1, total: mse + l1 })
}

/// Variables of a loss recorded on a tape.
struct TapeLoss {
    total: Var,
    mse: Var,
    l1: Option<Var>,
    f: Var,
    recon: Var,
    w_e: Var,
    b_e: Var,
    w_d: Var,
    log_scaler: Var,
}

/// Records the loss. Encoder and scaler become leaves only when trained;
/// the L1 term is omitted for finetuning.
fn record_loss(tape: &mut Tape, m: &DictionaryModule, x: &Tensor, label: &Tensor, train_encoder: bool, train_scaler: bool, with_l1: bool) -> Result<TapeLoss> {
    let w = inverse_variance_weights(label)?;
    let r = x.shape()[0];
    let xv = tape.constant(x.clone());
    let yv = tape.constant(label.clone());
    let wv = tape.constant(Tensor::from_vec(w));
    let (w_e, b_e) = if train_encoder {
        (tape.leaf(m.w_e.clone()), tape.leaf(m.b_e.clone()))
    } else {
        (tape.constant(m.w_e.clone()), tape.constant(m.b_e.clone()))
    };
    let w_d = tape.leaf(m.w_d.clone());
    let log_scaler = if train_scaler {
        tape.leaf(m.log_scaler.clone())
    } else {
        tape.constant(m.log_scaler.clone())
    };
    let mask = tape.constant(m.alive_mask_tensor());
    let pre = tape.matmul_nt(xv, w_e)?;
    let pre = tape.add_row(pre, b_e)?;
    let f = tape.relu(pre)?;
    let f = tape.mul_row(f, mask)?;
    let scaler = tape.exp(log_scaler)?;
    let fs = tape.mul_row(f, scaler)?;
    let recon = tape.matmul_nt(fs, w_d)?;
    let diff = tape.sub(recon, yv)?;
    let se = tape.row_sq_norm(diff)?;
    let weighted = tape.mul(se, wv)?;
    let mse = tape.sum(weighted)?;
    let (total, l1) = if with_l1 {
        let s = tape.sum(f)?;
        let l1 = tape.scale(s, m.lambda / r as f32)?;
        (tape.add(mse, l1)?, Some(l1))
    } else {
        (mse, None)
    };
    Ok(TapeLoss {
        total,
        mse,
        l1,
        f,
        recon,
        w_e,
        b_e,
        w_d,
        log_scaler,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub tokens: usize,
    pub mse: f64,
    pub l1: f64,
    pub l0: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub points: Vec<HistoryPoint>,
    /// Largest decoder column norm observed right after any optimiser step.
    pub max_post_step_decoder_norm: f32,
    pub steps: usize,
    pub resampled: usize,
    /// Mean loss terms over the final 10% of steps.
    pub final_mse: f64,
    pub final_l1: f64,
    pub final_l0: f64,
}

/// Normalised `(input, label)` for a dictionary from raw buffer rows.
fn normalised_pair(hook: HookSpec, input: &Tensor, label: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = row_scales(input)?;
    let x = scale_rows(input, &s);
    let y = if hook.kind() == DictKind::Transcoder { scale_rows(label, &s) } else { x.clone() };
    Ok((x, y))
}

struct Trainer {
    module: DictionaryModule,
    adam: AdamState,
    history: TrainHistory,
    input_stream: usize,
    label_stream: usize,
    silent_steps: Vec<usize>,
    tail: (f64, f64, f64, usize),
}

fn hook_points(specs: &[HookSpec]) -> Vec<HookPoint> {
    let mut points: Vec<HookPoint> = Vec::new();
    for s in specs {
        for p in [s.input_point(), s.label_point()] {
            if !points.contains(&p) {
                points.push(p);
            }
        }
    }
    points
}

/// Trains one dictionary per spec from a single shared activation stream.
/// All specs must agree on batch size, token budget and buffer size.
pub fn train_dictionaries(
    model: &Transformer,
    corpus: &[TokenSequence],
    specs: &[(HookSpec, DictTrainConfig)],
    pad: usize,
    mut progress: impl FnMut(usize, &str),
) -> Result<Vec<(DictionaryModule, TrainHistory)>> {
    let Some((_, first)) = specs.first() else {
        return Ok(Vec::new());
    };
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty dictionary training corpus".into()));
    }
    for (h, c) in specs {
        c.validate()?;
        if (c.batch_size, c.token_budget, c.buffer_size) != (first.batch_size, first.token_budget, first.buffer_size) {
            return Err(Error::InvalidInput(format!("{h}: shared stream settings differ")));
        }
        if h.layer >= model.config.n_layers {
            return Err(Error::InvalidInput(format!("{h}: layer out of range")));
        }
    }
    let d = model.config.d_model;
    let hooks: Vec<HookSpec> = specs.iter().map(|(h, _)| *h).collect();
    let points = hook_points(&hooks);
    let mut trainers: Vec<Trainer> = specs
        .iter()
        .map(|(h, c)| {
            let mut module = DictionaryModule::init(*h, d, d * c.expansion_factor, c.lambda, c.seed);
            module.training_config = Some(c.clone());
            let adam = AdamState::new(c.adam(), [&module.w_e, &module.b_e, &module.w_d]);
            Trainer {
                silent_steps: vec![0; module.d_sae()],
                module,
                adam,
                history: TrainHistory::default(),
                input_stream: points.iter().position(|&p| p == h.input_point()).unwrap(),
                label_stream: points.iter().position(|&p| p == h.label_point()).unwrap(),
                tail: (0.0, 0.0, 0.0, 0),
            }
        })
        .collect();

    let mut stream = ActivationStream::new(model, corpus, points.clone(), pad, first.seqs_per_chunk, first.seed);
    let mut buffer = ShuffleBuffer::new(points.len(), d, first.buffer_size, first.seed);
    let total_steps = first.token_budget.div_ceil(first.batch_size);
    let tail_start = total_steps - total_steps.div_ceil(10);
    let mut resample_rng = substream(first.seed, "dict-resample");
    for step in 0..total_steps {
        while buffer.needs_refill() {
            buffer.push(&stream.next_chunk()?);
        }
        let batch = buffer.take_batch(first.batch_size).expect("buffer holds a full batch");
        for t in trainers.iter_mut() {
            let (x, y) = normalised_pair(t.module.hook, &batch[t.input_stream], &batch[t.label_stream])?;
            let mut tape = Tape::new();
            let rec = record_loss(&mut tape, &t.module, &x, &y, true, false, true)?;
            let total = tape.value(rec.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: total,
                    detail: format!("dictionary {}", t.module.hook),
                });
            }
            let mse = tape.value(rec.mse).item() as f64;
            let l1 = tape.value(rec.l1.unwrap()).item() as f64;
            let f = tape.value(rec.f).clone();
            let recon = tape.value(rec.recon).clone();
            let mut grads = tape.backward(rec.total)?;
            let g = [grads.take(rec.w_e), grads.take(rec.b_e), grads.take(rec.w_d)];
            {
                let m = &mut t.module;
                t.adam.step(&mut [&mut m.w_e, &mut m.b_e, &mut m.w_d], &g)?;
                m.clamp_decoder_norms();
            }
            let worst = t.module.decoder_norms().into_iter().fold(0.0f32, f32::max);
            t.history.max_post_step_decoder_norm = t.history.max_post_step_decoder_norm.max(worst);
            let rows = x.shape()[0];
            let ds = t.module.d_sae();
            let l0 = f.data().iter().filter(|&&v| v > 0.0).count() as f64 / rows as f64;
            let mut fired = vec![false; ds];
            for row in f.data().chunks(ds) {
                for (j, &v) in row.iter().enumerate() {
                    fired[j] |= v > 0.0;
                }
            }
            for (s, fi) in t.silent_steps.iter_mut().zip(&fired) {
                *s = if *fi { 0 } else { *s + 1 };
            }
            let every = t.module.training_config.as_ref().map_or(0, |c| c.resample_every);
            if every > 0 && (step + 1) % every == 0 {
                t.history.resampled += resample_dead(&mut t.module, &t.silent_steps, every, &x, &y, &recon, &mut resample_rng);
            }
            if step >= tail_start {
                t.tail.0 += mse;
                t.tail.1 += l1;
                t.tail.2 += l0;
                t.tail.3 += 1;
            }
            let log_every = t.module.training_config.as_ref().map_or(100, |c| c.log_every.max(1));
            if step % log_every == 0 || step + 1 == total_steps {
                t.history.points.push(HistoryPoint {
                    step,
                    tokens: (step + 1) * rows,
                    mse,
                    l1,
                    l0,
                });
                progress(step, &format!("{} mse {mse:.4} l1 {l1:.4} l0 {l0:.1}", t.module.hook));
            }
        }
    }
    Ok(trainers
        .into_iter()
        .map(|mut t| {
            let n = t.tail.3.max(1) as f64;
            t.history.final_mse = t.tail.0 / n;
            t.history.final_l1 = t.tail.1 / n;
            t.history.final_l0 = t.tail.2 / n;
            t.history.steps = total_steps;
            (t.module, t.history)
        })
        .collect())
}

/// Trains a single dictionary.
pub fn train_dictionary(
    model: &Transformer,
    corpus: &[TokenSequence],
    hook: HookSpec,
    config: &DictTrainConfig,
    pad: usize,
) -> Result<(DictionaryModule, TrainHistory)> {
    Ok(train_dictionaries(model, corpus, &[(hook, config.clone())], pad, |_, _| {})?.remove(0))
}

/// Re-initialises features that have been silent for `window` steps towards
/// poorly reconstructed rows of the current batch. Returns the count.
fn resample_dead(
    m: &mut DictionaryModule,
    silent: &[usize],
    window: usize,
    x: &Tensor,
    y: &Tensor,
    recon: &Tensor,
    rng: &mut impl Rng,
) -> usize {
    let dead: Vec<usize> = (0..m.d_sae()).filter(|&j| m.alive[j] && silent[j] >= window).collect();
    if dead.is_empty() {
        return 0;
    }
    let (rows, d) = x.dims2();
    let err: Vec<f64> = (0..rows)
        .map(|i| y.row(i).iter().zip(recon.row(i)).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
        .collect();
    let total: f64 = err.iter().sum();
    if total == 0.0 {
        return 0;
    }
    let ds = m.d_sae();
    for &j in &dead {
        let mut u = rng.random::<f64>() * total;
        let mut i = 0;
        while i + 1 < rows && u > err[i] {
            u -= err[i];
            i += 1;
        }
        let dir: Vec<f32> = y.row(i).iter().zip(recon.row(i)).map(|(a, b)| a - b).collect();
        let n = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        let xn = x.row(i).iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        for k in 0..d {
            m.w_d.data_mut()[k * ds + j] = dir[k] / n;
            m.w_e.data_mut()[j * d + k] = 0.2 * x.row(i)[k] / xn;
        }
        m.b_e.data_mut()[j] = 0.0;
    }
    dead.len()
}

/// Finetunes decoder and activation scalers against the reconstruction loss
/// alone; the encoder is never touched.
pub fn finetune_decoder(
    model: &Transformer,
    corpus: &[TokenSequence],
    module: &DictionaryModule,
    config: &DictTrainConfig,
    pad: usize,
) -> Result<(DictionaryModule, TrainHistory)> {
    config.validate()?;
    let mut m = module.clone();
    let hook = m.hook;
    let points = hook_points(&[hook]);
    let input_stream = points.iter().position(|&p| p == hook.input_point()).unwrap();
    let label_stream = points.iter().position(|&p| p == hook.label_point()).unwrap();
    let mut adam = AdamState::new(config.adam(), [&m.w_d, &m.log_scaler]);
    let mut stream = ActivationStream::new(model, corpus, points.clone(), pad, config.seqs_per_chunk, config.seed ^ 0x5eed);
    let mut buffer = ShuffleBuffer::new(points.len(), m.d_model(), config.buffer_size, config.seed ^ 0x5eed);
    let total_steps = config.token_budget.div_ceil(config.batch_size);
    let mut history = TrainHistory::default();
    let tail_start = total_steps - total_steps.div_ceil(10);
    let mut tail = (0.0, 0usize);
    for step in 0..total_steps {
        while buffer.needs_refill() {
            buffer.push(&stream.next_chunk()?);
        }
        let batch = buffer.take_batch(config.batch_size).expect("full batch");
        let (x, y) = normalised_pair(hook, &batch[input_stream], &batch[label_stream])?;
        let mut tape = Tape::new();
        let rec = record_loss(&mut tape, &m, &x, &y, false, true, false)?;
        let mse = tape.value(rec.mse).item() as f64;
        if !mse.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: mse,
                detail: format!("finetuning {hook}"),
            });
        }
        let mut grads = tape.backward(rec.total)?;
        let g = [grads.take(rec.w_d), grads.take(rec.log_scaler)];
        adam.step(&mut [&mut m.w_d, &mut m.log_scaler], &g)?;
        m.clamp_decoder_norms();
        let worst = m.decoder_norms().into_iter().fold(0.0f32, f32::max);
        history.max_post_step_decoder_norm = history.max_post_step_decoder_norm.max(worst);
        if step >= tail_start {
            tail.0 += mse;
            tail.1 += 1;
        }
        if step % config.log_every.max(1) == 0 || step + 1 == total_steps {
            history.points.push(HistoryPoint {
                step,
                tokens: (step + 1) * config.batch_size,
                mse,
                l1: 0.0,
                l0: 0.0,
            });
        }
    }
    history.steps = total_steps;
    history.final_mse = tail.0 / tail.1.max(1) as f64;
    Ok((m, history))
}
