//! Dense arrays, multilayer perceptrons with hand-written backpropagation,
//! Adam, and the numerically stable loss primitives the critics and actors
//! are built from.
//!
//! Batches are row-major `(batch, features)` matrices of `f64`.

mod adam;
pub mod gradcheck;
mod loss;
mod mlp;
mod params;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use loss::{
    log_sigmoid, log_softmax_rows, logsumexp, logsumexp_slice, sigmoid, sigmoid_bce_with_logits,
    softmax_rows, softplus,
};
pub use mlp::{Activation, Dense, Mlp, MlpCache};
pub use params::{Grads, Parameterized};
pub use rng::{rng_stream, RngState, Streams};

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Real-valued batch array, `(rows, columns)`.
pub type RealArray = Array2<f64>;

/// Concatenates matrices along columns. All inputs must share a row count.
pub fn hconcat(parts: &[ArrayView2<'_, f64>]) -> crate::Result<RealArray> {
    ndarray::concatenate(Axis(1), parts)
        .map_err(|e| crate::Error::shape("hconcat", "equal row counts", e))
}

/// Row-wise dot product of two equally shaped matrices.
pub fn row_dot(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) -> Array1<f64> {
    debug_assert_eq!(a.dim(), b.dim());
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.dot(&y))
        .collect()
}

/// One-hot rows for the given indices.
pub fn one_hot(indices: &[usize], width: usize) -> RealArray {
    let mut out = Array2::zeros((indices.len(), width));
    for (row, &i) in indices.iter().enumerate() {
        out[[row, i]] = 1.0;
    }
    out
}
