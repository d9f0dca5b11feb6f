// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct contributions through affine maps whose input-dependent factors
//! (attention patterns, normalisation scales) have been frozen from a
//! forward pass.
//!
//! If `x = v_1 + ... + v_n` and `f(x) = x·W + b` with `W` frozen, part `v_i`
//! contributes `v_i·W` and `b` is reported separately. A chain of such maps
//! is decomposed by pushing every part through each stage in turn; biases of
//! earlier stages are carried through later ones.

use crate::numerics::Tensor;
use crate::{Error, Result};

/// `y = x·matrix + bias`, with `matrix` row-major `[input_dim, output_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAffine {
    pub input_dim: usize,
    pub output_dim: usize,
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-part outputs plus the accumulated pure-bias output.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributions {
    pub parts: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Contributions {
    /// Sum of all parts and the bias.
    pub fn total(&self) -> Vec<f64> {
        let mut t = self.bias.clone();
        for p in &self.parts {
            for (a, b) in t.iter_mut().zip(p) {
                *a += b;
            }
        }
        t
    }
}

impl FrozenAffine {
    pub fn new(matrix: Vec<f64>, input_dim: usize, output_dim: usize, bias: Vec<f64>) -> Result<Self> {
        if matrix.len() != input_dim * output_dim || bias.len() != output_dim {
            return Err(Error::shape(
                "frozen affine",
                format!(
                    "matrix {} / bias {} for {input_dim}x{output_dim}",
                    matrix.len(),
                    bias.len()
                ),
            ));
        }
        Ok(FrozenAffine {
            input_dim,
            output_dim,
            matrix,
            bias,
        })
    }

    /// Linear map from a `[in, out]` weight tensor and optional bias.
    pub fn from_tensor(w: &Tensor, bias: Option<&[f32]>) -> Result<Self> {
        let (i, o) = w.dims2();
        let matrix = w.data().iter().map(|&v| v as f64).collect();
        let bias = match bias {
            Some(b) => b.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; o],
        };
        Self::new(matrix, i, o, bias)
    }

    /// `x ↦ s·x`.
    pub fn scalar(s: f64, dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = s;
        }
        FrozenAffine {
            input_dim: dim,
            output_dim: dim,
            matrix,
            bias: vec![0.0; dim],
        }
    }

    /// LayerNorm with its per-token `rstd` frozen:
    /// `x ↦ gain ⊙ (x - mean(x))·rstd + bias`.
    pub fn frozen_layer_norm(gain: &[f32], bias: &[f32], rstd: f64) -> Self {
        let d = gain.len();
        let inv = 1.0 / d as f64;
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let c = if i == j { 1.0 - inv } else { -inv };
                matrix[i * d + j] = c * rstd * gain[j] as f64;
            }
        }
        FrozenAffine {
            input_dim: d,
            output_dim: d,
            matrix,
            bias: bias.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Keeps output columns `range`.
    pub fn select_outputs(&self, range: std::ops::Range<usize>) -> Self {
        let o = range.len();
        let mut matrix = Vec::with_capacity(self.input_dim * o);
        for i in 0..self.input_dim {
            matrix.extend_from_slice(&self.matrix[i * self.output_dim + range.start..i * self.output_dim + range.end]);
        }
        FrozenAffine {
            input_dim: self.input_dim,
            output_dim: o,
            matrix,
            bias: self.bias[range].to_vec(),
        }
    }

    /// Keeps input rows `range`; the bias is unchanged.
    pub fn select_inputs(&self, range: std::ops::Range<usize>) -> Self {
        FrozenAffine {
            input_dim: range.len(),
            output_dim: self.output_dim,
            matrix: self.matrix[range.start * self.output_dim..range.end * self.output_dim].to_vec(),
            bias: self.bias.clone(),
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    /// `x·matrix`, no bias.
    pub fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "frozen affine input width");
        let mut y = vec![0.0; self.output_dim];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.matrix[i * self.output_dim..(i + 1) * self.output_dim];
            for (yj, &m) in y.iter_mut().zip(row) {
                *yj += xi * m;
            }
        }
        y
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.apply_linear(x);
        for (a, b) in y.iter_mut().zip(&self.bias) {
            *a += b;
        }
        y
    }

    /// The composition `x ↦ next(self(x))`.
    pub fn then(&self, next: &FrozenAffine) -> Result<FrozenAffine> {
        if self.output_dim != next.input_dim {
            return Err(Error::shape(
                "frozen affine composition",
                format!("{} -> {}", self.output_dim, next.input_dim),
            ));
        }
        let mut matrix = Vec::with_capacity(self.input_dim * next.output_dim);
        for i in 0..self.input_dim {
            matrix.extend(next.apply_linear(&self.matrix[i * self.output_dim..(i + 1) * self.output_dim]));
        }
        Ok(FrozenAffine {
            input_dim: self.input_dim,
            output_dim: next.output_dim,
            matrix,
            bias: next.apply(&self.bias),
        })
    }
}

/// Relative tolerance for a partition to count as summing to its input.
pub const PARTITION_TOL: f64 = 1e-5;

/// Pushes each part of `x` through the chain `stages[0]`, `stages[1]`, ...
///
/// Fails if the parts do not sum to `x`. The returned parts plus the bias sum
/// to the chain's output on `x`.
pub fn direct_contribution(stages: &[FrozenAffine], parts: &[Vec<f64>], x: &[f64]) -> Result<Contributions> {
    let first = stages
        .first()
        .ok_or_else(|| Error::InvalidInput("direct contribution needs at least one stage".into()))?;
    if x.len() != first.input_dim || parts.iter().any(|p| p.len() != x.len()) {
        return Err(Error::shape("direct contribution", "part width differs from the input"));
    }
    let mut sum = vec![0.0; x.len()];
    for p in parts {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let worst = sum.iter().zip(x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if worst > PARTITION_TOL * scale {
        return Err(Error::InvalidInput(format!("partition does not sum to the input (max diff {worst:e})")));
    }
    let mut out = Contributions {
        parts: parts.to_vec(),
        bias: vec![0.0; x.len()],
    };
    for (k, stage) in stages.iter().enumerate() {
        if k > 0 && stages[k - 1].output_dim != stage.input_dim {
            return Err(Error::shape("direct contribution", format!("stage {k} input width")));
        }
        out.parts = out.parts.iter().map(|p| stage.apply_linear(p)).collect();
        out.bias = stage.apply(&out.bias);
    }
    Ok(out)
}
