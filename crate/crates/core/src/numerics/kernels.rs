// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward kernels shared by the tape and by the plain inference path.
//!
//! Both paths call exactly these functions, so a tape-free forward and a
//! recorded forward produce bit-identical values.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Strided single-precision GEMM: `c = alpha * a·b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access into `a`, `b`
    // and the contiguous row-major `c`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[.., k] x [k, n] -> [.., n]`; leading dimensions of `a` are preserved.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    if b.rank() != 2 || b.shape()[0] != k {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// `[m, k] x [n, k]^T -> [m, n]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (n, kb) = b.dims2();
    if k != kb {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `[k, m]^T x [k, n] -> [m, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2();
    let (kb, n) = b.dims2();
    if k != kb {
        return Err(Error::shape(
            "matmul_tn",
            format!("{:?}^T x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (1, m), b.data(), (n, 1), 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Batched matmul over a leading group dimension.
/// `a: [g, m, k]`; `b: [g, k, n]`, or `[g, n, k]` when `trans_b`.
pub fn bmm(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (g, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (kb, n) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if kb != k {
        return Err(Error::shape("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; g * m * n];
    let bstride = k * n;
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    for gi in 0..g {
        gemm(
            m,
            k,
            n,
            &a.data()[gi * m * k..(gi + 1) * m * k],
            (k, 1),
            &b.data()[gi * bstride..(gi + 1) * bstride],
            b_strides,
            0.0,
            &mut out[gi * m * n..(gi + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

pub fn gelu(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let (r, _) = out.dims2();
    for i in 0..r {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Causal softmax over `[g, t, t]` scores: row `i` only sees columns `0..=i`;
/// masked entries are exactly zero.
pub fn causal_softmax(scores: &Tensor) -> Result<Tensor> {
    if scores.rank() != 3 || scores.shape()[1] != scores.shape()[2] {
        return Err(Error::shape("causal_softmax", format!("{:?}", scores.shape())));
    }
    let (g, t) = (scores.shape()[0], scores.shape()[1]);
    let mut out = scores.clone();
    let data = out.data_mut();
    for gi in 0..g {
        for i in 0..t {
            let row = &mut data[(gi * t + i) * t..(gi * t + i + 1) * t];
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Row-wise layer norm. Returns `(y, x_hat, rstd)` where
/// `x_hat = (x - mean) * rstd` and `y = x_hat * gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &[f32], bias: &[f32]) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (r, d) = x.dims2();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {}, bias {}", x.shape(), gain.len(), bias.len()),
        ));
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xhat.row(i)[j] * gain[j] + bias[j];
        }
    }
    Ok((y, xhat, rstds))
}

/// Mean (optionally weighted) token cross-entropy. Returns the loss and the
/// softmax probabilities.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f32]) -> Result<(f64, Tensor)> {
    let (n, v) = logits.dims2();
    if targets.len() != n || weights.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidInput(format!("target {bad} >= vocab {v}")));
    }
    let total_w: f64 = weights.iter().map(|&w| w as f64).sum();
    if total_w <= 0.0 {
        return Err(Error::InvalidInput("cross_entropy: zero total weight".into()));
    }
    let mut probs = softmax_rows(logits);
    let mut loss = 0.0f64;
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        loss += weights[i] as f64 * (lse - row[targets[i]] as f64);
    }
    probs.data_mut().iter_mut().for_each(|p| {
        if !p.is_finite() {
            *p = 0.0;
        }
    });
    Ok((loss / total_w, probs))
}

/// Batched `a^T b` over a leading group dimension: `[g, k, m]^T x [g, k, n] -> [g, m, n]`.
pub fn bmm_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("bmm_tn", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (g, k, m, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        gemm(
            m,
            k,
            n,
            &a.data()[gi * k * m..(gi + 1) * k * m],
            (1, m),
            &b.data()[gi * k * n..(gi + 1) * k * n],
            (n, 1),
            0.0,
            &mut out[gi * m * n..(gi + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

/// `[batch * seq, heads * d_head] -> [batch * heads, seq, d_head]`.
pub fn split_heads(x: &Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
    let (rows, width) = x.dims2();
    if rows != batch * seq || width % heads != 0 {
        return Err(Error::shape("split_heads", format!("{:?}", x.shape())));
    }
    let dh = width / heads;
    let mut out = vec![0.0; rows * width];
    let src = x.data();
    for b in 0..batch {
        for t in 0..seq {
            let row = &src[(b * seq + t) * width..(b * seq + t + 1) * width];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch * heads, seq, dh], out))
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != batch * heads || x.shape()[1] != seq {
        return Err(Error::shape("merge_heads", format!("{:?}", x.shape())));
    }
    let dh = x.shape()[2];
    let width = heads * dh;
    let mut out = vec![0.0; batch * seq * width];
    let src = x.data();
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let s = ((b * heads + h) * seq + t) * dh;
                let d = (b * seq + t) * width + h * dh;
                out[d..d + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch * seq, width], out))
}
