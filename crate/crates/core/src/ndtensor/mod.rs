//! Dense `f64` tensors with a small reverse-mode differentiation engine.
//!
//! The graph records each operation as it is applied; reductions always run
//! in ascending index order so results are reproducible bit-for-bit and
//! can be compared against naive loop oracles with tight tolerances.
//! GELU uses the tanh approximation
//! `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
//!
//! The free functions in this module are the non-differentiating versions
//! of the graph operations, for code that only needs values.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, Params};
pub use tensor::{kernels, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, p) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, p], kernels::matmul(a.data(), b.data(), m, k, p))
}

pub fn row_softmax(a: &Tensor) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        kernels::row_softmax(a.data(), a.cols(), "row_softmax")?,
    )
}

pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gv, bv) = (
        g.constant(a.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(x, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

pub fn gelu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| kernels::gelu(x)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Elementwise sum; `b` may broadcast over the leading axes of `a`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let z = g.add(x, y)?;
    Ok(g.value(z).clone())
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}
