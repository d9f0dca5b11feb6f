// SPDX-License-Identifier: MIT OR Apache-2.0

//! Streams model activations into a shuffling buffer.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numerics::seeds::{substream, Rng as SeedRng};
use crate::numerics::Tensor;
use crate::toymodel::model::pad_batch;
use crate::toymodel::{HookPoint, TokenSequence, Transformer};
use crate::Result;

/// Activations of several hook points for the same token rows.
#[derive(Clone, Debug)]
pub struct ActivationChunk {
    pub points: Vec<HookPoint>,
    /// One `[rows, d_model]` tensor per entry of `points`.
    pub data: Vec<Tensor>,
}

impl ActivationChunk {
    pub fn rows(&self) -> usize {
        self.data.first().map_or(0, |t| t.shape()[0])
    }

    pub fn get(&self, p: HookPoint) -> Option<&Tensor> {
        self.points.iter().position(|&q| q == p).map(|i| &self.data[i])
    }
}

/// Runs `seqs` through the model and records the requested hook points for
/// every real (non-pad) token.
pub fn harvest(model: &Transformer, seqs: &[&TokenSequence], points: &[HookPoint], pad: usize) -> Result<ActivationChunk> {
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let (tokens, seq, mask) = pad_batch(&refs, pad);
    let d = model.config.d_model;
    let n_real = mask.iter().filter(|&&m| m).count();
    let mut data: Vec<Vec<f32>> = vec![Vec::with_capacity(n_real * d); points.len()];
    let mut hook = |p: HookPoint, x: &mut Tensor| -> Result<()> {
        for (i, _) in points.iter().enumerate().filter(|&(_, &q)| q == p) {
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    data[i].extend_from_slice(x.row(r));
                }
            }
        }
        Ok(())
    };
    model.forward_batch(&tokens, seqs.len(), seq, Some(&mut hook))?;
    let data = data
        .into_iter()
        .map(|v| Tensor::new(vec![n_real, d], v))
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationChunk {
        points: points.to_vec(),
        data,
    })
}

/// Cycles through a corpus in shuffled epochs, yielding activation chunks.
pub struct ActivationStream<'a> {
    model: &'a Transformer,
    corpus: &'a [TokenSequence],
    points: Vec<HookPoint>,
    pad: usize,
    seqs_per_chunk: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: SeedRng,
}

impl<'a> ActivationStream<'a> {
    pub fn new(
        model: &'a Transformer,
        corpus: &'a [TokenSequence],
        points: Vec<HookPoint>,
        pad: usize,
        seqs_per_chunk: usize,
        seed: u64,
    ) -> Self {
        ActivationStream {
            model,
            corpus,
            points,
            pad,
            seqs_per_chunk: seqs_per_chunk.max(1),
            order: Vec::new(),
            cursor: 0,
            rng: substream(seed, "data/dict-stream"),
        }
    }

    pub fn next_chunk(&mut self) -> Result<ActivationChunk> {
        let mut picked = Vec::with_capacity(self.seqs_per_chunk);
        while picked.len() < self.seqs_per_chunk {
            if self.cursor == self.order.len() {
                self.order = (0..self.corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(&self.corpus[self.order[self.cursor]]);
            self.cursor += 1;
        }
        harvest(self.model, &picked, &self.points, self.pad)
    }
}

/// Row buffer that hands out uniformly random batches. Rows of all streams
/// stay aligned, so a transcoder's input and label are drawn together.
///
/// The buffer is owned by a single consumer; a producer hands it chunks
/// through [`ShuffleBuffer::push`].
#[derive(Debug)]
pub struct ShuffleBuffer {
    width: usize,
    capacity: usize,
    data: Vec<Vec<f32>>,
    rows: usize,
    rng: SeedRng,
}

impl ShuffleBuffer {
    pub fn new(streams: usize, width: usize, capacity: usize, seed: u64) -> Self {
        ShuffleBuffer {
            width,
            capacity,
            data: vec![Vec::with_capacity(capacity * width); streams],
            rows: 0,
            rng: substream(seed, "buffer-shuffle"),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// True until the buffer holds `capacity` rows.
    pub fn needs_refill(&self) -> bool {
        self.rows < self.capacity
    }

    pub fn push(&mut self, chunk: &ActivationChunk) {
        assert_eq!(chunk.data.len(), self.data.len(), "stream count mismatch");
        for (dst, src) in self.data.iter_mut().zip(&chunk.data) {
            dst.extend_from_slice(src.data());
        }
        self.rows += chunk.rows();
    }

    /// Removes `n` random rows; returns one `[n, width]` tensor per stream.
    pub fn take_batch(&mut self, n: usize) -> Option<Vec<Tensor>> {
        if n == 0 || self.rows < n {
            return None;
        }
        let w = self.width;
        let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(n * w); self.data.len()];
        for _ in 0..n {
            let i = self.rng.random_range(0..self.rows);
            let last = self.rows - 1;
            for (o, d) in out.iter_mut().zip(self.data.iter_mut()) {
                o.extend_from_slice(&d[i * w..(i + 1) * w]);
                if i != last {
                    let (head, tail) = d.split_at_mut(last * w);
                    head[i * w..(i + 1) * w].copy_from_slice(&tail[..w]);
                }
                d.truncate(last * w);
            }
            self.rows -= 1;
        }
        Some(
            out.into_iter()
                .map(|v| Tensor::new(vec![n, w], v).expect("batch shape"))
                .collect(),
        )
    }
}
