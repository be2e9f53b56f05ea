//! Central finite differences, used as the independent reference for every
//! analytic gradient in the crate.
//!
//! Relative error is measured on whole gradient vectors,
//! `|a - b| / max(|a| + |b|, 1e-300)` with Euclidean norms, so that entries
//! whose true gradient is zero do not blow up the ratio.

use ndarray::Array2;

use super::{Grads, Parameterized};

pub fn finite_difference<M, F>(model: &M, loss: F, h: f64) -> Grads
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let mut work = model.clone();
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
    let mut blocks = Vec::with_capacity(sizes.len());
    for (b, &n) in sizes.iter().enumerate() {
        let mut grad = vec![0.0; n];
        for (i, g) in grad.iter_mut().enumerate() {
            let original = work.params()[b].1[i];
            work.params_mut()[b][i] = original + h;
            let plus = loss(&work);
            work.params_mut()[b][i] = original - h;
            let minus = loss(&work);
            work.params_mut()[b][i] = original;
            *g = (plus - minus) / (2.0 * h);
        }
        blocks.push(grad);
    }
    Grads { blocks }
}

pub fn finite_difference_input<F>(input: &Array2<f64>, f: F, h: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut work = input.clone();
    let mut out = Array2::zeros(input.dim());
    for idx in ndarray::indices(input.dim()) {
        let original = work[idx];
        work[idx] = original + h;
        let plus = f(&work);
        work[idx] = original - h;
        let minus = f(&work);
        work[idx] = original;
        out[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

fn vector_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-300)
}

pub fn relative_error(a: &Grads, b: &Grads) -> f64 {
    vector_relative_error(&a.flat(), &b.flat())
}

pub fn array_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    vector_relative_error(
        &a.iter().copied().collect::<Vec<_>>(),
        &b.iter().copied().collect::<Vec<_>>(),
    )
}
