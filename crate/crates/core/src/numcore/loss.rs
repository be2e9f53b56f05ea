use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Mean sigmoid binary cross-entropy over every entry, with its gradient
/// with respect to the logits.
///
/// Per entry: `max(x, 0) - x y + ln(1 + e^{-|x|})`.
pub fn sigmoid_bce_with_logits(
    logits: &ArrayView2<'_, f64>,
    labels: &ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != labels.dim() {
        return Err(Error::shape(
            "sigmoid_bce_with_logits",
            format!("{:?}", logits.dim()),
            format!("{:?}", labels.dim()),
        ));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(labels)
        .for_each(|g, &x, &y| {
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            *g = (sigmoid(x) - y) / n;
        });
    Ok((total / n, grad))
}

pub fn logsumexp_slice(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::shape("logsumexp", "non-empty axis", 0));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Max-shifted log-sum-exp along `axis` (0 = down columns, 1 = along rows).
pub fn logsumexp(values: &ArrayView2<'_, f64>, axis: usize) -> Result<Array1<f64>> {
    if axis > 1 {
        return Err(Error::shape("logsumexp axis", "0 or 1", axis));
    }
    if values.len_of(Axis(axis)) == 0 {
        return Err(Error::shape("logsumexp", "non-empty axis", 0));
    }
    let other = Axis(1 - axis);
    values
        .axis_iter(other)
        .map(|lane| logsumexp_slice(&lane.to_vec()))
        .collect()
}

pub fn softmax_rows(logits: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn log_softmax_rows(logits: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let lse = logsumexp_slice(&row.to_vec()).expect("non-empty row");
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{rng_stream, Streams};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn bce_zero_logits_is_ln2() {
        let logits = Array2::zeros((3, 4));
        let labels = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
        let (loss, _) = sigmoid_bce_with_logits(&logits.view(), &labels.view()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_correct() {
        let (loss, _) =
            sigmoid_bce_with_logits(&array![[20.0]].view(), &array![[1.0]].view()).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = rng_stream(11, Streams::Probe);
        let logits = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-6.0..6.0));
        let labels =
            Array2::from_shape_simple_fn((5, 6), || if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let (loss, grad) = sigmoid_bce_with_logits(&logits.view(), &labels.view()).unwrap();
        let mut direct = 0.0;
        for (x, y) in logits.iter().zip(labels.iter()) {
            let s = 1.0 / (1.0 + (-x).exp());
            direct += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        direct /= 30.0;
        assert!((loss - direct).abs() < 1e-10);
        let numeric = crate::numcore::gradcheck::finite_difference_input(
            &logits,
            |l| {
                sigmoid_bce_with_logits(&l.view(), &labels.view())
                    .unwrap()
                    .0
            },
            1e-5,
        );
        assert!(crate::numcore::gradcheck::array_relative_error(&grad, &numeric) < 1e-8);
    }

    #[test]
    fn bce_shape_mismatch() {
        let r =
            sigmoid_bce_with_logits(&Array2::zeros((2, 2)).view(), &Array2::zeros((2, 3)).view());
        assert!(r.is_err());
    }

    #[test]
    fn logsumexp_pair_of_zeros() {
        assert!((logsumexp_slice(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logsumexp_slice(&[]).is_err());
        assert!(logsumexp(&Array2::<f64>::zeros((2, 0)).view(), 1).is_err());
    }

    #[test]
    fn logsumexp_near_overflow() {
        // 50-digit mpmath evaluation of ln(e^700 + e^701 + e^699.5)
        let v = logsumexp_slice(&[700.0, 701.0, 699.5]).unwrap();
        let reference = 701.464368784107944841620106056;
        assert!(v.is_finite());
        assert!((v - reference).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_axes() {
        let m = array![[0.0, 1.0], [2.0, 3.0]];
        let rows = logsumexp(&m.view(), 1).unwrap();
        let cols = logsumexp(&m.view(), 0).unwrap();
        assert!((rows[0] - (1.0f64.exp() + 1.0).ln()).abs() < 1e-14);
        assert!((cols[1] - (1.0f64.exp() + 3.0f64.exp()).ln()).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn logsumexp_shift(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = logsumexp_slice(&shifted).unwrap();
            let b = logsumexp_slice(&xs).unwrap() + c;
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }

        #[test]
        fn log_sigmoid_consistent(x in -700.0f64..700.0) {
            let s = sigmoid(x);
            prop_assert!((0.0..=1.0).contains(&s));
            if x.abs() < 30.0 {
                prop_assert!((log_sigmoid(x) - s.ln()).abs() < 1e-12);
            }
            prop_assert!(log_sigmoid(x).is_finite());
        }
    }
}
