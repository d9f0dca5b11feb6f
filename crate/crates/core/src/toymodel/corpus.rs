// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic task corpora: nested brackets, induction and IOI templates.
//!
//! Every sequence starts with BOS. Induction and IOI sequences end at the
//! query position; the expected next token lives in the metadata.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, OBJECTS, PLACES, VERBS};
use crate::numerics::seeds::{substream, Rng as SeedRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bracket,
    Induction,
    Ioi,
}

/// Which name opens an IOI prompt. `AnswerFirst` is the "When Mary and John
/// went ..., John gave ... to" form; `SubjectFirst` swaps the first two names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoiOrder {
    AnswerFirst,
    SubjectFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoiMeta {
    pub subject: usize,
    pub indirect_object: usize,
    pub order: IoiOrder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub answer_pos: Option<usize>,
    pub answer_token: Option<usize>,
    pub family: Family,
    /// Bracket nesting depth per token; brackets carry the depth outside them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<u8>>,
    /// Position of the first `[B]` in an induction sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_b_pos: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ioi: Option<IoiMeta>,
}

impl TokenSequence {
    fn plain(tokens: Vec<usize>, family: Family) -> Self {
        TokenSequence {
            tokens,
            answer_pos: None,
            answer_token: None,
            family,
            depths: None,
            first_b_pos: None,
            ioi: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} outside 1..={max_seq_len}",
                self.tokens.len()
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} >= vocab size {vocab_size}")));
        }
        if let Some(p) = self.answer_pos {
            if p >= self.tokens.len() {
                return Err(Error::InvalidInput(format!("answer_pos {p} past end of sequence")));
            }
        }
        Ok(())
    }

    /// Next-token targets: the following token, or the answer at the answer
    /// position when it is the last token. `None` marks untrained positions.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let n = self.tokens.len();
        (0..n)
            .map(|p| {
                if p + 1 < n {
                    Some(self.tokens[p + 1])
                } else if self.answer_pos == Some(p) {
                    self.answer_token
                } else {
                    None
                }
            })
            .collect()
    }
}

/// A list of sequences together with the vocabulary they index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema_version: u32,
    pub vocabulary: Vocabulary,
    pub sequences: Vec<TokenSequence>,
}

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

impl Corpus {
    pub fn new(vocabulary: Vocabulary, sequences: Vec<TokenSequence>) -> Self {
        Corpus {
            schema_version: CORPUS_SCHEMA_VERSION,
            vocabulary,
            sequences,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Corpus = serde_json::from_str(&s)?;
        if c.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported corpus schema {}", c.schema_version)));
        }
        c.vocabulary = c.vocabulary.reindex()?;
        Ok(c)
    }
}

/// One step of a bracket string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BracketEvent {
    Digit,
    Open,
    Close,
}

/// Renders a bracket event list. Each digit is the number of brackets seen
/// so far (mod 10).
pub fn bracket_from_events(vocab: &Vocabulary, events: &[BracketEvent]) -> Result<TokenSequence> {
    let open = vocab.expect_id("[");
    let close = vocab.expect_id("]");
    let mut tokens = vec![vocab.bos()];
    let mut depths = vec![0u8];
    let mut depth = 0u8;
    let mut brackets = 0usize;
    for e in events {
        match e {
            BracketEvent::Digit => {
                tokens.push(vocab.digit(brackets));
                depths.push(depth);
            }
            BracketEvent::Open => {
                tokens.push(open);
                depths.push(depth);
                depth += 1;
                brackets += 1;
            }
            BracketEvent::Close => {
                if depth == 0 {
                    return Err(Error::InvalidInput("unbalanced closing bracket".into()));
                }
                depth -= 1;
                brackets += 1;
                tokens.push(close);
                depths.push(depth);
            }
        }
    }
    if depth != 0 {
        return Err(Error::InvalidInput("unclosed bracket".into()));
    }
    let mut s = TokenSequence::plain(tokens, Family::Bracket);
    s.depths = Some(depths);
    Ok(s)
}

pub const BRACKET_MIN_EVENTS: usize = 16;
pub const BRACKET_MAX_EVENTS: usize = 40;

pub fn generate_bracket_corpus(vocab: &Vocabulary, count: usize, max_depth: usize, seed: u64) -> Vec<TokenSequence> {
    assert!(max_depth >= 1, "max_depth must be at least 1");
    let mut rng = substream(seed, "data/bracket");
    (0..count)
        .map(|_| {
            let target = rng.random_range(BRACKET_MIN_EVENTS..=BRACKET_MAX_EVENTS);
            let mut events = Vec::with_capacity(target);
            let mut depth = 0usize;
            while events.len() + depth < target {
                let r: f64 = rng.random();
                let e = if depth < max_depth && r < 0.22 {
                    BracketEvent::Open
                } else if depth > 0 && r > 0.72 {
                    BracketEvent::Close
                } else {
                    BracketEvent::Digit
                };
                match e {
                    BracketEvent::Open => depth += 1,
                    BracketEvent::Close => depth -= 1,
                    BracketEvent::Digit => {}
                }
                events.push(e);
            }
            events.extend(std::iter::repeat_n(BracketEvent::Close, depth));
            bracket_from_events(vocab, &events).expect("generator emits balanced events")
        })
        .collect()
}

/// Builds `BOS fill* A B fill* A` with the answer `B` at the final position.
/// `a_pos` is the index of the first `A`.
pub fn induction_sequence(vocab: &Vocabulary, fill: &[usize], a_pos: usize, a: usize, b: usize) -> TokenSequence {
    let mut tokens = vec![vocab.bos()];
    let mut it = fill.iter();
    while tokens.len() < a_pos {
        tokens.push(*it.next().expect("not enough filler"));
    }
    tokens.push(a);
    tokens.push(b);
    tokens.extend(it);
    tokens.push(a);
    let mut s = TokenSequence::plain(tokens, Family::Induction);
    s.answer_pos = Some(s.tokens.len() - 1);
    s.answer_token = Some(b);
    s.first_b_pos = Some(a_pos + 1);
    s
}

pub fn generate_induction_corpus(vocab: &Vocabulary, count: usize, seq_len: usize, seed: u64) -> Vec<TokenSequence> {
    assert!(seq_len >= 4, "seq_len must be at least 4");
    let mut rng = substream(seed, "data/induction");
    let content = vocab.content_ids();
    let filler = vocab.filler_ids();
    (0..count)
        .map(|_| {
            let a = *content.choose(&mut rng).unwrap();
            let b = loop {
                let b = *content.choose(&mut rng).unwrap();
                if b != a {
                    break b;
                }
            };
            let n_fill = seq_len - 4;
            let fill: Vec<usize> = (0..n_fill)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        // Distractor content tokens keep "copy any earlier
                        // content token" from solving the task.
                        loop {
                            let c = *content.choose(&mut rng).unwrap();
                            if c != a && c != b {
                                break c;
                            }
                        }
                    } else {
                        *filler.choose(&mut rng).unwrap()
                    }
                })
                .collect();
            let a_pos = rng.random_range(1..=1 + n_fill);
            induction_sequence(vocab, &fill, a_pos, a, b)
        })
        .collect()
}

/// `n` pairs `a_i b_i` of distinct content tokens scattered among fillers,
/// then `r < n` of them recalled in random order, each after at least one
/// filler. At least one pair is never recalled, so the answer cannot be found
/// by elimination. Ends on a recalled `a`, answer its `b`.
pub fn pair_recall_sequence(vocab: &Vocabulary, n: usize, r: usize, rng: &mut SeedRng) -> TokenSequence {
    assert!(r >= 1 && r < n, "need 1 <= r < n");
    let content: Vec<usize> = vocab.content_ids().choose_multiple(rng, 2 * n).copied().collect();
    let filler = vocab.filler_ids();
    let mut tokens = vec![vocab.bos()];
    let fill = |tokens: &mut Vec<usize>, lo: usize, hi: usize, rng: &mut SeedRng| {
        for _ in 0..rng.random_range(lo..=hi) {
            tokens.push(*filler.choose(rng).unwrap());
        }
    };
    for i in 0..n {
        fill(&mut tokens, 0, 2, rng);
        tokens.push(content[2 * i]);
        tokens.push(content[2 * i + 1]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.truncate(r);
    for (k, &i) in order.iter().enumerate() {
        fill(&mut tokens, 1, 3, rng);
        tokens.push(content[2 * i]);
        if k + 1 < r {
            tokens.push(content[2 * i + 1]);
        }
    }
    let b = content[2 * order[r - 1] + 1];
    let first_b = tokens.iter().position(|&t| t == b);
    let mut s = TokenSequence::plain(tokens, Family::Induction);
    s.answer_pos = Some(s.tokens.len() - 1);
    s.answer_token = Some(b);
    s.first_b_pos = first_b;
    s
}

/// `BOS s_1 .. s_k s_o .. s_{o+m-1}` for a segment of `k` distinct content
/// tokens and a copy of `m` of them starting at offset `o`, answer
/// `s_{o+m}`. Every token of the copy after its first is predictable by
/// induction, so these sequences supply dense training signal.
pub fn repeated_segment_sequence(vocab: &Vocabulary, k: usize, o: usize, m: usize, rng: &mut SeedRng) -> TokenSequence {
    assert!(m >= 1 && o + m < k, "need m >= 1 and o + m < k");
    let seg: Vec<usize> = vocab.content_ids().choose_multiple(rng, k).copied().collect();
    let mut tokens = vec![vocab.bos()];
    tokens.extend(&seg);
    tokens.extend(&seg[o..o + m]);
    let mut s = TokenSequence::plain(tokens, Family::Induction);
    s.answer_pos = Some(s.tokens.len() - 1);
    s.answer_token = Some(seg[o + m]);
    s.first_b_pos = Some(o + m + 1);
    s
}

/// `BOS When X and Y went to the P , S V the O to` with answer IO.
pub fn ioi_sequence(
    vocab: &Vocabulary,
    subject: usize,
    indirect_object: usize,
    order: IoiOrder,
    place: &str,
    object: &str,
    verb: &str,
) -> TokenSequence {
    let (first, second) = match order {
        IoiOrder::AnswerFirst => (indirect_object, subject),
        IoiOrder::SubjectFirst => (subject, indirect_object),
    };
    let w = |s: &str| vocab.expect_id(s);
    let tokens = vec![
        vocab.bos(),
        w("When"),
        first,
        w("and"),
        second,
        w("went"),
        w("to"),
        w("the"),
        w(place),
        w(","),
        subject,
        w(verb),
        w("the"),
        w(object),
        w("to"),
    ];
    let mut s = TokenSequence::plain(tokens, Family::Ioi);
    s.answer_pos = Some(s.tokens.len() - 1);
    s.answer_token = Some(indirect_object);
    s.ioi = Some(IoiMeta {
        subject,
        indirect_object,
        order,
    });
    s
}

fn sample_ioi(vocab: &Vocabulary, names: &[usize], rng: &mut SeedRng, order: IoiOrder) -> TokenSequence {
    let s = *names.choose(rng).unwrap();
    let io = loop {
        let n = *names.choose(rng).unwrap();
        if n != s {
            break n;
        }
    };
    let place = PLACES.choose(rng).unwrap();
    let object = OBJECTS.choose(rng).unwrap();
    let verb = VERBS.choose(rng).unwrap();
    ioi_sequence(vocab, s, io, order, place, object, verb)
}

pub fn generate_ioi_corpus(vocab: &Vocabulary, count: usize, seed: u64) -> Vec<TokenSequence> {
    let names = vocab.name_ids();
    assert!(names.len() >= 2, "need at least two names");
    let mut rng = substream(seed, "data/ioi");
    (0..count)
        .map(|k| {
            // Alternate orders so both templates are equally represented.
            let order = if k % 2 == 0 { IoiOrder::AnswerFirst } else { IoiOrder::SubjectFirst };
            sample_ioi(vocab, &names, &mut rng, order)
        })
        .collect()
}

/// Relative frequencies of the sequence types in a training mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub bracket: f64,
    pub induction: f64,
    pub ioi: f64,
    /// Repeated random segments, see [`repeated_segment_sequence`].
    pub repeated: f64,
    /// Scattered pairs recalled later, see [`pair_recall_sequence`].
    #[serde(default)]
    pub recall: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        MixtureWeights {
            bracket: 0.1,
            induction: 0.2,
            ioi: 0.15,
            repeated: 0.4,
            recall: 0.15,
        }
    }
}

/// Draws a mixed training corpus with the given family weights.
pub fn generate_mixture(
    vocab: &Vocabulary,
    count: usize,
    weights: MixtureWeights,
    induction_len: (usize, usize),
    seed: u64,
) -> Vec<TokenSequence> {
    let mut rng: SeedRng = substream(seed, "data/mixture");
    let w = [weights.bracket, weights.induction, weights.ioi, weights.repeated, weights.recall];
    let total: f64 = w.iter().sum();
    let names = vocab.name_ids();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut r = rng.random::<f64>() * total;
        let sub_seed = rng.random::<u64>();
        let mut pick = 0;
        while pick + 1 < w.len() && r >= w[pick] {
            r -= w[pick];
            pick += 1;
        }
        let s = match pick {
            0 => generate_bracket_corpus(vocab, 1, 2, sub_seed).remove(0),
            1 => {
                let len = rng.random_range(induction_len.0..=induction_len.1);
                generate_induction_corpus(vocab, 1, len, sub_seed).remove(0)
            }
            2 => {
                let order = if rng.random_bool(0.5) { IoiOrder::AnswerFirst } else { IoiOrder::SubjectFirst };
                sample_ioi(vocab, &names, &mut rng, order)
            }
            3 => {
                // Long copies give induction heads enough signal to form.
                let k = rng.random_range(8..=24);
                let o = rng.random_range(0..=2);
                let m = rng.random_range((k - o) / 2..k - o);
                repeated_segment_sequence(vocab, k, o, m, &mut rng)
            }
            _ => {
                let n = rng.random_range(2..=6);
                let r = rng.random_range(1..n);
                pair_recall_sequence(vocab, n, r, &mut rng)
            }
        };
        out.push(s);
    }
    out
}
