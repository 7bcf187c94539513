//! Dense `f64` tensors with reverse-mode differentiation, sized for a small
//! transformer encoder and the probing losses built on top of it.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{finite_difference_check, CoordinateCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Elementwise GELU of a tensor, outside any graph.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Softmax of the last axis, outside any graph.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant_ref(x);
    let y = g.softmax(v)?;
    Ok(g.tensor(y))
}

/// `−Σ_{i∈indices} p_i log₂ p_i`.
pub fn entropy_bits(p: &[f64], indices: &[usize]) -> Result<f64> {
    let mut h = 0.0;
    for &i in indices {
        let pi = *p.get(i).ok_or(Error::OutOfRange {
            what: "entropy index",
            index: i,
            len: p.len(),
        })?;
        if pi < 0.0 {
            return Err(Error::NegativeProbability {
                index: i,
                value: pi,
            });
        }
        if pi > 0.0 {
            h -= pi * kernels::log2(pi);
        }
    }
    Ok(h)
}
