//! Scalar-loop reference implementations and random inputs shared by the
//! integration tests. The oracles in this file never call the library's
//! numeric code; `compare` and `model` run the library side.

#![allow(dead_code)]

use hbaf::autograd::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[t][f] = b[f] + sum_o sum_j x[t + o][j] * w[(o + half) * D + j][f]`,
/// zero outside the sequence.
pub fn conv_oracle(x: &Matrix, w: &Matrix, b: &Matrix, kernel: usize) -> Matrix {
    let (n, dim) = x.dim();
    let filters = w.ncols();
    let half = (kernel / 2) as isize;
    let mut out = Matrix::zeros((n, filters));
    for t in 0..n {
        for f in 0..filters {
            let mut acc = b[[0, f]];
            for o in -half..=half {
                let src = t as isize + o;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let tap = (o + half) as usize;
                for j in 0..dim {
                    acc += x[[src as usize, j]] * w[[tap * dim + j, f]];
                }
            }
            out[[t, f]] = acc;
        }
    }
    out
}

fn dot_col(row: &[f64], w: &Matrix, col: usize) -> f64 {
    row.iter().enumerate().map(|(i, v)| v * w[[i, col]]).sum()
}

/// One LSTM direction with gate blocks (input, forget, cell, output).
pub fn lstm_oracle(x: &Matrix, w_x: &Matrix, w_h: &Matrix, b: &Matrix, reverse: bool) -> Matrix {
    let (n, dim) = x.dim();
    let u = w_h.nrows();
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    let mut out = Matrix::zeros((n, u));
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt: Vec<f64> = (0..dim).map(|j| x[[t, j]]).collect();
        let pre = |k: usize, m: usize| b[[0, k * u + m]] + dot_col(&xt, w_x, k * u + m) + dot_col(&h, w_h, k * u + m);
        let mut next_h = vec![0.0; u];
        for m in 0..u {
            let i = sig(pre(0, m));
            let f = sig(pre(1, m));
            let g = pre(2, m).tanh();
            let o = sig(pre(3, m));
            c[m] = f * c[m] + i * g;
            next_h[m] = o * c[m].tanh();
        }
        h = next_h;
        for m in 0..u {
            out[[t, m]] = h[m];
        }
    }
    out
}

/// One GRU update with gate blocks (reset, update, candidate).
pub fn gru_oracle(h: &[f64], x: &[f64], w_x: &Matrix, w_h: &Matrix, b_x: &Matrix, b_h: &Matrix) -> Vec<f64> {
    let u = h.len();
    (0..u)
        .map(|m| {
            let gx = |k: usize| dot_col(x, w_x, k * u + m) + b_x[[0, k * u + m]];
            let gh = |k: usize| dot_col(h, w_h, k * u + m) + b_h[[0, k * u + m]];
            let r = sig(gx(0) + gh(0));
            let z = sig(gx(1) + gh(1));
            let cand = (gx(2) + r * gh(2)).tanh();
            (1.0 - z) * h[m] + z * cand
        })
        .collect()
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `softmax(q k^T / sqrt(d)) v`, returning the output and the probabilities.
pub fn attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    let mut probs = Matrix::zeros((nq, nk));
    let mut out = Matrix::zeros((nq, v.ncols()));
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let p = softmax_oracle(&scores);
        for j in 0..nk {
            probs[[i, j]] = p[j];
            for c in 0..v.ncols() {
                out[[i, c]] += p[j] * v[[j, c]];
            }
        }
    }
    (out, probs)
}

/// Support-weighted mean of per-class `2 tp / (2 tp + fp + fn)`.
pub fn weighted_f1_oracle(labels: &[usize], preds: &[usize], classes: usize) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let (mut tp, mut fp, mut fneg, mut support) = (0.0, 0.0, 0.0, 0.0);
        for (&y, &p) in labels.iter().zip(preds) {
            if y == c {
                support += 1.0;
            }
            match (y == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fneg;
        if denom > 0.0 {
            total += support / n * (2.0 * tp / denom);
        }
    }
    total
}

pub mod compare;
pub mod model;
