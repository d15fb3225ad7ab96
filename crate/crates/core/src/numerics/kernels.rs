// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar kernels shared by the plain forward pass and the adjoint tape.
//!
//! Both paths call exactly these functions, which is what makes a taped
//! replay bit-identical to an untaped forward. Every reduction runs left to
//! right in index order; no kernel reorders a sum.

use super::Tensor2;

/// Variance floor inside layer norm.
pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out = x · w` for a row vector `x` (len = w.rows). Each output column
/// accumulates `x[0]*w[0][j] + x[1]*w[1][j] + ...` in that order.
pub fn vec_mat(x: &[f64], w: &Tensor2, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// `out = w · g` (len = w.rows); the transpose product used by backward.
pub fn mat_vec(w: &Tensor2, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(g.len(), w.cols());
    debug_assert_eq!(out.len(), w.rows());
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(i), g);
    }
}

/// Centred, variance-normalised copy of `x` (before the affine step).
/// A constant vector normalises to zeros.
pub fn normalize(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    if var == 0.0 {
        out.fill(0.0);
        return 0.0;
    }
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Layer norm with affine parameters. Returns the inverse std used
/// (0 for a constant input).
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> f64 {
    let inv = normalize(x, out);
    for i in 0..out.len() {
        out[i] = out[i] * gamma[i] + beta[i];
    }
    inv
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Max-shifted softmax. `-inf` entries map to exactly 0.
pub fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out = sum_j probs[j] * values[j]`, accumulated over j in order.
pub fn attend(probs: &[f64], values: &[&[f64]], out: &mut [f64]) {
    out.fill(0.0);
    for (p, v) in probs.iter().zip(values) {
        for (o, &vv) in out.iter_mut().zip(v.iter()) {
            *o += p * vv;
        }
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of a probability vector; 0·ln 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}
