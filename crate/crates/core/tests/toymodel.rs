// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::fixtures::{random_tokens, tiny, tiny_config};
use lincirc::numerics::seeds::substream;
use lincirc::toymodel::corpus::{
    generate_induction_corpus, generate_mixture, pair_recall_sequence, repeated_segment_sequence, IoiOrder,
};
use lincirc::toymodel::train::evaluate_answers;
use lincirc::toymodel::{train_lm, Family, LmTrainConfig, Transformer, Vocabulary};

fn layer_norm(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&g, &b))| (v as f64 - mean) * r * g as f64 + b as f64)
        .collect()
}

#[test]
fn cache_invariants() {
    let t = tiny(1);
    let tokens = random_tokens(&t.vocab, 12, 1);
    let (logits, c) = t.model.forward_with_cache(&tokens).unwrap();
    let n = tokens.len();
    let d = t.model.config.d_model;
    for (l, lc) in c.layers.iter().enumerate() {
        for k in 0..n * d {
            let mid = lc.resid_pre.data()[k] + lc.attn_out.data()[k];
            assert!((mid - lc.resid_mid.data()[k]).abs() < 1e-5);
            if l + 1 < c.layers.len() {
                let next = lc.resid_mid.data()[k] + lc.mlp_out.data()[k];
                assert!((next - c.layers[l + 1].resid_pre.data()[k]).abs() < 1e-5);
            }
        }
        let h = t.model.config.n_heads;
        for hh in 0..h {
            for i in 0..n {
                let row = &lc.patterns.data()[(hh * n + i) * n..(hh * n + i + 1) * n];
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|&p| p == 0.0), "acausal pattern");
            }
        }
    }
    // Final residual = embeddings plus every module output.
    for k in 0..n * d {
        let mut sum = c.tok_embed.data()[k] as f64 + c.pos_embed.data()[k] as f64;
        for lc in &c.layers {
            sum += lc.attn_out.data()[k] as f64 + lc.mlp_out.data()[k] as f64;
        }
        assert!((sum - c.resid_final.data()[k] as f64).abs() < 1e-4);
    }
    // Logits from the cached final residual.
    let v = t.model.config.vocab_size;
    for p in 0..n {
        let ln = layer_norm(c.resid_final.row(p), t.model.lnf_g.data(), t.model.lnf_b.data());
        for tok in 0..v {
            let z: f64 = (0..d).map(|r| ln[r] * t.model.w_u.data()[r * v + tok] as f64).sum();
            assert!((z - logits.row(p)[tok] as f64).abs() < 1e-4, "logit {p},{tok}");
        }
    }
    assert_eq!(c.logits, logits);
    let (_, again) = t.model.forward_with_cache(&tokens).unwrap();
    assert_eq!(format!("{again:?}"), format!("{c:?}"));
    assert_eq!(t.model.forward(&tokens).unwrap(), logits);
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let t = tiny(2);
    let a = random_tokens(&t.vocab, 12, 5);
    let mut b = a.clone();
    for (k, tok) in b.iter_mut().enumerate().skip(7) {
        *tok = t.vocab.content_ids()[k];
    }
    let (la, lb) = (t.model.forward(&a).unwrap(), t.model.forward(&b).unwrap());
    for p in 0..7 {
        assert_eq!(la.row(p), lb.row(p));
    }
    assert_ne!(la.row(7), lb.row(7));
}

#[test]
fn invalid_sequences_are_rejected() {
    let t = tiny(3);
    assert!(t.model.forward(&vec![0; 17]).is_err());
    assert!(t.model.forward(&[0, t.vocab.len()]).is_err());
}

#[test]
fn induction_tokens_are_uniform() {
    let v = Vocabulary::standard();
    let content = v.content_ids();
    let corpus = generate_induction_corpus(&v, 10_000, 12, 7);
    let k = content.len();
    let mut a_counts = vec![0usize; v.len()];
    let mut b_counts = vec![0usize; v.len()];
    for s in &corpus {
        a_counts[*s.tokens.last().unwrap()] += 1;
        b_counts[s.answer_token.unwrap()] += 1;
        assert_eq!(s.family, Family::Induction);
        assert_eq!(s.tokens[s.first_b_pos.unwrap()], s.answer_token.unwrap());
    }
    // Pearson chi-square against the uniform law on content tokens, with a
    // bound five standard deviations above its mean.
    let df = (k - 1) as f64;
    let bound = df + 5.0 * (2.0 * df).sqrt();
    for counts in [&a_counts, &b_counts] {
        assert_eq!(counts.iter().enumerate().filter(|&(i, &c)| c > 0 && !content.contains(&i)).count(), 0);
        let e = corpus.len() as f64 / k as f64;
        let chi: f64 = content.iter().map(|&i| (counts[i] as f64 - e).powi(2) / e).sum();
        assert!(chi < bound, "chi-square {chi} over bound {bound}");
    }
    assert!(generate_induction_corpus(&v, 0, 12, 7).is_empty());
}

#[test]
fn copy_families_need_the_matching_token() {
    let v = Vocabulary::standard();
    let mut rng = substream(4, "test");
    for _ in 0..200 {
        let s = repeated_segment_sequence(&v, 9, 3, 2, &mut rng);
        let (p, a) = (s.answer_pos.unwrap(), s.answer_token.unwrap());
        assert_eq!(s.tokens.len(), 12);
        // The answer follows the first occurrence of the current token.
        let first = s.tokens.iter().position(|&t| t == s.tokens[p]).unwrap();
        assert_eq!(s.tokens[first + 1], a);
        assert_eq!(s.first_b_pos, Some(first + 1));

        let s = pair_recall_sequence(&v, 4, 2, &mut rng);
        let (p, a) = (s.answer_pos.unwrap(), s.answer_token.unwrap());
        let first = s.tokens.iter().position(|&t| t == s.tokens[p]).unwrap();
        assert!(first < p);
        assert_eq!(s.tokens[first + 1], a);
        assert_eq!(s.first_b_pos, Some(first + 1));
        // Two pairs are never recalled: their first tokens occur once.
        let content = v.content_ids();
        let once = content
            .iter()
            .filter(|&&c| s.tokens.iter().filter(|&&t| t == c).count() == 1)
            .count();
        assert!(once >= 4, "{once}");
    }
}

#[test]
fn mixture_covers_every_family() {
    let v = Vocabulary::standard();
    let corpus = generate_mixture(&v, 400, Default::default(), (8, 20), 3);
    for f in [Family::Bracket, Family::Induction, Family::Ioi] {
        assert!(corpus.iter().any(|s| s.family == f));
    }
    let ioi: Vec<_> = corpus.iter().filter_map(|s| s.ioi.as_ref()).collect();
    assert!(ioi.iter().any(|m| m.order == IoiOrder::AnswerFirst));
    assert!(ioi.iter().any(|m| m.order == IoiOrder::SubjectFirst));
    for s in &corpus {
        s.validate(v.len(), 64).unwrap();
    }
    assert_eq!(corpus, generate_mixture(&v, 400, Default::default(), (8, 20), 3));
}

#[test]
fn zero_steps_leave_the_initial_model() {
    let v = Vocabulary::standard();
    let cfg = tiny_config(v.len());
    let corpus = generate_induction_corpus(&v, 32, 10, 1);
    let params = LmTrainConfig { steps: 0, ..Default::default() };
    let (m, report) = train_lm(&cfg, &corpus, &params, v.pad(), 4).unwrap();
    assert!(report.losses.is_empty());
    let init = Transformer::init(&cfg, 4).unwrap();
    assert_eq!(m.forward(&corpus[0].tokens).unwrap(), init.forward(&corpus[0].tokens).unwrap());
    let eval = evaluate_answers(&m, &corpus).unwrap();
    assert!((eval.loss - (v.len() as f64).ln()).abs() < 0.1, "loss {}", eval.loss);
}

#[test]
fn training_is_deterministic_and_learns() {
    let v = Vocabulary::standard();
    let cfg = tiny_config(v.len());
    let corpus = generate_induction_corpus(&v, 64, 10, 2);
    let params = LmTrainConfig { steps: 30, batch_size: 8, warmup: 5, ..Default::default() };
    let (m1, r1) = train_lm(&cfg, &corpus, &params, v.pad(), 9).unwrap();
    let (m2, r2) = train_lm(&cfg, &corpus, &params, v.pad(), 9).unwrap();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(m1.to_archive(), m2.to_archive());
    let first: f64 = r1.losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = r1.losses[25..].iter().sum::<f64>() / 5.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn divergence_is_reported() {
    let v = Vocabulary::standard();
    let cfg = tiny_config(v.len());
    let corpus = generate_induction_corpus(&v, 16, 10, 2);
    let params = LmTrainConfig { steps: 200, batch_size: 4, warmup: 1, lr: 1e30, grad_clip: 1e30, ..Default::default() };
    match train_lm(&cfg, &corpus, &params, v.pad(), 1) {
        Err(lincirc::Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
    assert!(train_lm(&cfg, &[], &params, v.pad(), 1).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let t = tiny(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lcgt");
    t.model.save(&path, &t.vocab, serde_json::json!({"note": 1})).unwrap();
    let (back, side) = Transformer::load(&path).unwrap();
    assert_eq!(side.config, t.model.config);
    assert_eq!(side.vocabulary, t.vocab);
    let tokens = random_tokens(&t.vocab, 9, 2);
    assert_eq!(back.forward(&tokens).unwrap(), t.model.forward(&tokens).unwrap());
}

#[test]
fn model_gradients_match_directional_differences() {
    use lincirc::toymodel::train::loss_and_grads;
    use lincirc::toymodel::TokenSequence;
    let vocab = Vocabulary::standard();
    let mut model = Transformer::init(&tiny_config(vocab.len()), 3).unwrap();
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|x| *x *= 3.0);
    }
    let seqs = generate_induction_corpus(&vocab, 3, 12, 5);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (_, grads) = loss_and_grads(&model, &refs, vocab.pad()).unwrap();
    let eps = 1e-3f32;
    for (i, g) in grads.iter().enumerate() {
        let n = g.numel();
        let dir: Vec<f32> = (0..n).map(|k| ((k * 7919 + i * 104_729) % 1000) as f32 / 500.0 - 1.0).collect();
        let analytic: f64 = dir.iter().zip(g.data()).map(|(&d, &g)| d as f64 * g as f64).sum();
        let orig = model.params_mut()[i].data().to_vec();
        let mut loss_at = |sign: f32| {
            for (x, (&o, &d)) in model.params_mut()[i].data_mut().iter_mut().zip(orig.iter().zip(&dir)) {
                *x = o + sign * eps * d;
            }
            loss_and_grads(&model, &refs, vocab.pad()).unwrap().0
        };
        let fd = (loss_at(1.0) - loss_at(-1.0)) / (2.0 * eps as f64);
        model.params_mut()[i].data_mut().copy_from_slice(&orig);
        // The floor covers f32 rounding of the loss, about 3e-4 after dividing by 2 eps.
        let err = (fd - analytic).abs() / analytic.abs().max(5e-2);
        assert!(err < 2e-2, "parameter {i}: analytic {analytic} vs differences {fd}");
    }
}
