//! Array values, a reverse-mode tape, and a finite-difference checker.
//!
//! The free functions here are the eager form of the tape's ops, for callers
//! that only need values.

mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use array::{Array, Precision};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttentionMask, Gradients, Graph, Var};
pub use kernels::{sigmoid, Elementwise};

use rand::Rng;

use crate::error::{dim_err, Result};

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.ndim() != 2 {
        return dim_err(format!("matmul lhs must be 2-D, got {:?}", a.shape()));
    }
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(x, y)?;
    Ok(g.value(out).clone())
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    if axis >= x.ndim() {
        return dim_err(format!("axis {axis} for shape {:?}", x.shape()));
    }
    let shape = x.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[(o * n + j) * inner + i];
            }
            kernels::softmax_row(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[(o * n + j) * inner + i] = *b;
            }
        }
    }
    Ok(out)
}

pub fn elementwise(kind: Elementwise, x: &Array) -> Result<Array> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.unary(v, kind)?;
    Ok(g.value(out).clone())
}

pub fn layernorm(x: &Array, gamma: &Array, beta: &Array, eps: f64) -> Result<Array> {
    let mut g = Graph::new();
    let (v, s, b) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let out = g.layernorm(v, s, b, eps)?;
    Ok(g.value(out).clone())
}

pub fn dropout<R: Rng + ?Sized>(x: &Array, p: f64, training: bool, rng: &mut R) -> Result<Array> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.dropout(v, p, training, rng)?;
    Ok(g.value(out).clone())
}

/// Mean cross-entropy of `logits[N, V]` against `targets`, skipping `ignore_index`.
pub fn cross_entropy(logits: &Array, targets: &[i64], ignore_index: i64) -> Result<f64> {
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| {
            if t == ignore_index || t < 0 {
                None
            } else {
                Some(t as usize)
            }
        })
        .collect();
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let out = g.cross_entropy(v, &t)?;
    Ok(g.value(out).item())
}
