// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference oracle for the tape.
//!
//! Each primitive gets an independent `f64` reference forward written here;
//! the oracle differentiates that reference numerically (h = 1e-3) and the
//! tape's analytic gradients are compared against it.

use lincirc::numerics::seeds::substream;
use lincirc::numerics::{Tape, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;

type V = Vec<f64>;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], avoid_zero: bool) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = rng.random_range(-2.0..2.0);
        if !avoid_zero || v.abs() > 0.05 {
            break v;
        }
    })
}

fn to64(t: &Tensor) -> V {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Norm-wise relative error `||analytic - fd|| / ||fd||`, maximised over inputs.
pub fn check(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[V]) -> V,
    projection_seed: u64,
) -> f64 {
    // Scalarise through a fixed random projection of the output.
    let out_len = reference(&inputs.iter().map(to64).collect::<Vec<_>>()).len();
    let mut rng = substream(projection_seed, "projection");
    let proj: V = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let p = tape.constant(Tensor::new(shape, proj.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = tape.mul(out, p).unwrap();
    let root = tape.sum(prod).unwrap();
    let grads = tape.backward(root).unwrap();

    let f = |xs: &[V]| -> f64 { reference(xs).iter().zip(&proj).map(|(a, b)| a * b).sum() };
    let base: Vec<V> = inputs.iter().map(to64).collect();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = to64(&grads.get(*v));
        let mut fd = vec![0.0; base[k].len()];
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k][i] += H;
            minus[k][i] -= H;
            fd[i] = (f(&plus) - f(&minus)) / (2.0 * H);
        }
        let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if den == 0.0 { num } else { num / den };
        worst = worst.max(rel);
    }
    worst
}

// ----- f64 reference kernels -----

fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> V {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> V {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], frozen_rstd: Option<&[f64]>) -> V {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = frozen_rstd.map(|s| s[r]).unwrap_or(1.0 / (var + 1e-5).sqrt());
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    out
}

fn causal_softmax(s: &[f64], g: usize, t: usize) -> V {
    let mut out = vec![0.0; s.len()];
    for gi in 0..g {
        for i in 0..t {
            let row = &s[(gi * t + i) * t..(gi * t + i) * t + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..=i {
                out[(gi * t + i) * t + j] = (row[j] - max).exp() / z;
            }
        }
    }
    out
}

fn cross_entropy(logits: &[f64], v: usize, targets: &[usize], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    logits
        .chunks(v)
        .zip(targets)
        .zip(w)
        .map(|((row, &t), &wi)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            wi * (lse - row[t])
        })
        .sum::<f64>()
        / total
}

/// Runs every primitive check plus the two-layer MLP check; returns
/// `(name, worst relative error)` pairs.
pub fn run_all(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = substream(seed, "gradcheck");
    let mut out = Vec::new();
    let r = &mut rng;

    let a = rand_tensor(r, &[3, 4], false);
    let b = rand_tensor(r, &[4, 5], false);
    out.push((
        "matmul",
        check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), |x| mm(&x[0], 3, 4, &x[1], 5), 1),
    ));

    let a = rand_tensor(r, &[3, 4], false);
    let b = rand_tensor(r, &[5, 4], false);
    out.push((
        "matmul_nt",
        check(
            &[a, b],
            |t, v| t.matmul_nt(v[0], v[1]).unwrap(),
            |x| mm(&x[0], 3, 4, &transpose(&x[1], 5, 4), 5),
            2,
        ),
    ));

    for trans_b in [false, true] {
        let a = rand_tensor(r, &[2, 3, 4], false);
        let b = if trans_b { rand_tensor(r, &[2, 5, 4], false) } else { rand_tensor(r, &[2, 4, 5], false) };
        let name = if trans_b { "bmm_nt" } else { "bmm" };
        out.push((
            name,
            check(
                &[a, b],
                move |t, v| t.bmm(v[0], v[1], trans_b).unwrap(),
                move |x| {
                    let mut res = Vec::new();
                    for g in 0..2 {
                        let ag = &x[0][g * 12..(g + 1) * 12];
                        let bg = &x[1][g * 20..(g + 1) * 20];
                        let bg = if trans_b { transpose(bg, 5, 4) } else { bg.to_vec() };
                        res.extend(mm(ag, 3, 4, &bg, 5));
                    }
                    res
                },
                3,
            ),
        ));
    }

    let a = rand_tensor(r, &[3, 4], false);
    let b = rand_tensor(r, &[3, 4], false);
    out.push((
        "add",
        check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), |x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(), 4),
    ));
    out.push((
        "sub",
        check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), |x| x[0].iter().zip(&x[1]).map(|(p, q)| p - q).collect(), 5),
    ));
    out.push((
        "mul",
        check(&[a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap(), |x| x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect(), 6),
    ));

    let row = rand_tensor(r, &[4], false);
    out.push((
        "add_row",
        check(
            &[a.clone(), row.clone()],
            |t, v| t.add_row(v[0], v[1]).unwrap(),
            |x| x[0].iter().enumerate().map(|(i, p)| p + x[1][i % 4]).collect(),
            7,
        ),
    ));
    out.push((
        "mul_row",
        check(
            &[a.clone(), row],
            |t, v| t.mul_row(v[0], v[1]).unwrap(),
            |x| x[0].iter().enumerate().map(|(i, p)| p * x[1][i % 4]).collect(),
            8,
        ),
    ));
    let col = rand_tensor(r, &[3], false);
    out.push((
        "mul_col",
        check(
            &[a.clone(), col],
            |t, v| t.mul_col(v[0], v[1]).unwrap(),
            |x| x[0].iter().enumerate().map(|(i, p)| p * x[1][i / 4]).collect(),
            9,
        ),
    ));
    out.push((
        "scale",
        check(&[a.clone()], |t, v| t.scale(v[0], -1.7).unwrap(), |x| x[0].iter().map(|p| p * -1.7f32 as f64).collect(), 10),
    ));

    let z = rand_tensor(r, &[3, 4], true);
    out.push((
        "relu",
        check(&[z], |t, v| t.relu(v[0]).unwrap(), |x| x[0].iter().map(|p| p.max(0.0)).collect(), 11),
    ));
    out.push((
        "gelu",
        check(&[a.clone()], |t, v| t.gelu(v[0]).unwrap(), |x| x[0].iter().map(|&p| gelu(p)).collect(), 12),
    ));
    out.push((
        "exp",
        check(&[a.clone()], |t, v| t.exp(v[0]).unwrap(), |x| x[0].iter().map(|p| p.exp()).collect(), 13),
    ));

    let s = rand_tensor(r, &[2, 4, 4], false);
    out.push((
        "causal_softmax",
        check(&[s], |t, v| t.causal_softmax(v[0]).unwrap(), |x| causal_softmax(&x[0], 2, 4), 14),
    ));

    let x = rand_tensor(r, &[3, 6], false);
    let g = rand_tensor(r, &[6], false);
    let bb = rand_tensor(r, &[6], false);
    out.push((
        "layer_norm",
        check(
            &[x.clone(), g.clone(), bb.clone()],
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            |x| layer_norm(&x[0], 6, &x[1], &x[2], None),
            15,
        ),
    ));
    let rstd = vec![0.7f32, 1.3, 0.4];
    let rstd64: V = rstd.iter().map(|&v| v as f64).collect();
    out.push((
        "frozen_layer_norm",
        check(
            &[x, g, bb],
            move |t, v| t.frozen_layer_norm(v[0], v[1], v[2], rstd.clone()).unwrap(),
            move |x| layer_norm(&x[0], 6, &x[1], &x[2], Some(&rstd64)),
            16,
        ),
    ));

    let table = rand_tensor(r, &[5, 3], false);
    let ids = [4usize, 0, 4, 2];
    out.push((
        "embedding",
        check(
            &[table],
            move |t, v| t.embedding(v[0], &ids).unwrap(),
            move |x| ids.iter().flat_map(|&i| x[0][i * 3..i * 3 + 3].to_vec()).collect(),
            17,
        ),
    ));

    // [batch=2 * seq=3, heads=2 * dh=2]
    let hx = rand_tensor(r, &[6, 4], false);
    out.push((
        "split_heads",
        check(
            &[hx.clone()],
            |t, v| t.split_heads(v[0], 2, 3, 2).unwrap(),
            |x| {
                let mut res = vec![0.0; 24];
                for b in 0..2 {
                    for h in 0..2 {
                        for s in 0..3 {
                            for e in 0..2 {
                                res[((b * 2 + h) * 3 + s) * 2 + e] = x[0][(b * 3 + s) * 4 + h * 2 + e];
                            }
                        }
                    }
                }
                res
            },
            18,
        ),
    ));
    let hy = rand_tensor(r, &[4, 3, 2], false);
    out.push((
        "merge_heads",
        check(
            &[hy],
            |t, v| t.merge_heads(v[0], 2, 3, 2).unwrap(),
            |x| {
                let mut res = vec![0.0; 24];
                for b in 0..2 {
                    for h in 0..2 {
                        for s in 0..3 {
                            for e in 0..2 {
                                res[(b * 3 + s) * 4 + h * 2 + e] = x[0][((b * 2 + h) * 3 + s) * 2 + e];
                            }
                        }
                    }
                }
                res
            },
            19,
        ),
    ));

    out.push((
        "sum",
        check(&[a.clone()], |t, v| t.sum(v[0]).unwrap(), |x| vec![x[0].iter().sum()], 20),
    ));
    out.push((
        "row_sq_norm",
        check(
            &[a.clone()],
            |t, v| t.row_sq_norm(v[0]).unwrap(),
            |x| x[0].chunks(4).map(|r| r.iter().map(|p| p * p).sum()).collect(),
            21,
        ),
    ));

    let logits = rand_tensor(r, &[4, 5], false);
    let targets = [1usize, 4, 0, 2];
    let weights = [1.0f32, 0.5, 0.0, 2.0];
    out.push((
        "cross_entropy",
        check(
            &[logits],
            move |t, v| t.cross_entropy(v[0], &targets, &weights).unwrap(),
            move |x| {
                let w: V = weights.iter().map(|&w| w as f64).collect();
                vec![cross_entropy(&x[0], 5, &targets, &w)]
            },
            22,
        ),
    ));

    // Two-layer MLP with a cross-entropy head.
    let x = rand_tensor(r, &[4, 5], false);
    let w1 = rand_tensor(r, &[5, 8], false);
    let b1 = rand_tensor(r, &[8], false);
    let w2 = rand_tensor(r, &[8, 3], false);
    let b2 = rand_tensor(r, &[3], false);
    let tg = [0usize, 2, 1, 1];
    out.push((
        "mlp_2layer",
        check(
            &[x, w1, b1, w2, b2],
            move |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let h = t.gelu(h).unwrap();
                let o = t.matmul(h, v[3]).unwrap();
                let o = t.add_row(o, v[4]).unwrap();
                t.cross_entropy(o, &tg, &[1.0; 4]).unwrap()
            },
            move |x| {
                let mut h = mm(&x[0], 4, 5, &x[1], 8);
                for (i, v) in h.iter_mut().enumerate() {
                    *v = gelu(*v + x[2][i % 8]);
                }
                let mut o = mm(&h, 4, 8, &x[3], 3);
                for (i, v) in o.iter_mut().enumerate() {
                    *v += x[4][i % 3];
                }
                vec![cross_entropy(&o, 3, &tg, &[1.0; 4])]
            },
            23,
        ),
    ));
    out
}
