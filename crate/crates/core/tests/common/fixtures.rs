// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small randomly initialised model with every parameter perturbed (so
//! biases and LayerNorm gains are non-trivial) plus random dictionaries at
//! every site the graph needs.

use lincirc::dictionary::{DictionaryModule, DictionarySet, HookSpec, Site};
use lincirc::numerics::seeds::substream;
use lincirc::numerics::Tensor;
use lincirc::toymodel::{ActivationCache, ModelConfig, Transformer, Vocabulary};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub struct Tiny {
    pub model: Transformer,
    pub dicts: DictionarySet,
    pub vocab: Vocabulary,
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        vocab_size,
        max_seq_len: 16,
    }
}

fn jitter(t: &mut Tensor, rng: &mut impl Rng, sd: f32, base: Option<f32>) {
    let n = Normal::new(0.0f32, sd).unwrap();
    for v in t.data_mut() {
        *v = base.unwrap_or(*v) + n.sample(rng);
    }
}

pub fn tiny(seed: u64) -> Tiny {
    let vocab = Vocabulary::standard();
    let cfg = tiny_config(vocab.len());
    let mut model = Transformer::init(&cfg, seed).unwrap();
    let mut rng = substream(seed, "fixture");
    for p in &mut model.layers {
        jitter(&mut p.ln1_g, &mut rng, 0.2, Some(1.0));
        jitter(&mut p.ln2_g, &mut rng, 0.2, Some(1.0));
        for b in [&mut p.ln1_b, &mut p.ln2_b, &mut p.b_q, &mut p.b_k, &mut p.b_v, &mut p.b_o, &mut p.b_in, &mut p.b_out] {
            jitter(b, &mut rng, 0.1, Some(0.0));
        }
        for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o, &mut p.w_in, &mut p.w_out] {
            jitter(w, &mut rng, 0.3, None);
        }
    }
    jitter(&mut model.w_tok, &mut rng, 0.5, None);
    jitter(&mut model.lnf_g, &mut rng, 0.2, Some(1.0));
    jitter(&mut model.lnf_b, &mut rng, 0.1, Some(0.0));
    jitter(&mut model.w_u, &mut rng, 0.3, None);

    let mut hooks = vec![HookSpec::new(0, Site::WordEmbed)];
    for l in 0..cfg.n_layers {
        hooks.push(HookSpec::new(l, Site::AttnOut));
        hooks.push(HookSpec::new(l, Site::Mlp));
    }
    let modules = hooks
        .into_iter()
        .map(|h| {
            let mut m = DictionaryModule::init(h, cfg.d_model, 40, 1e-3, seed);
            jitter(&mut m.b_e, &mut rng, 0.3, Some(-0.1));
            jitter(&mut m.log_scaler, &mut rng, 0.2, Some(0.0));
            if h.site == Site::Mlp {
                jitter(&mut m.w_e, &mut rng, 0.2, None);
            }
            m.alive[3] = false;
            m
        })
        .collect();
    Tiny {
        model,
        dicts: DictionarySet::new(modules),
        vocab,
    }
}

/// BOS followed by `len - 1` random content tokens.
pub fn random_tokens(vocab: &Vocabulary, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, "fixture-tokens");
    let content = vocab.content_ids();
    let mut t = vec![vocab.bos()];
    t.extend((1..len).map(|_| content[rng.random_range(0..content.len())]));
    t
}

pub fn cache_for(model: &Transformer, tokens: &[usize]) -> ActivationCache {
    model.forward_with_cache(tokens).unwrap().1
}
