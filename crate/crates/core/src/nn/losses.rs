//! Loss primitives: row-wise softmax, cross-entropy on integer labels, and
//! mean squared error. Each returns the scalar loss together with the
//! gradients its callers need.

use crate::scalar::Scalar;
use ndarray::{Array2, ArrayView2, Axis};

/// Row-wise temperature softmax with max-subtraction.
pub fn softmax_rows<F: Scalar>(z: ArrayView2<'_, F>, temperature: F) -> Array2<F> {
    let mut out = Array2::<F>::zeros(z.raw_dim());
    for (zi, mut oi) in z.outer_iter().zip(out.outer_iter_mut()) {
        let max = zi.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (&v, o) in zi.iter().zip(oi.iter_mut()) {
            let e = ((v - max) / temperature).exp();
            *o = e;
            sum += e;
        }
        oi.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax (temperature 1).
pub fn log_softmax_rows<F: Scalar>(z: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::<F>::zeros(z.raw_dim());
    for (zi, mut oi) in z.outer_iter().zip(out.outer_iter_mut()) {
        let max = zi.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in zi.iter() {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        for (&v, o) in zi.iter().zip(oi.iter_mut()) {
            *o = v - log_z;
        }
    }
    out
}

/// Mean cross-entropy over the batch for integer labels.
/// Returns (loss, dL/dlogits).
pub fn cross_entropy<F: Scalar>(logits: ArrayView2<'_, F>, labels: &[usize]) -> (F, Array2<F>) {
    let (b, k) = logits.dim();
    assert_eq!(b, labels.len(), "cross_entropy batch/label length mismatch");
    let log_p = log_softmax_rows(logits);
    let mut loss = F::zero();
    for (bi, &y) in labels.iter().enumerate() {
        debug_assert!(y < k);
        loss -= log_p[[bi, y]];
    }
    let bn = F::from_f64(b as f64);
    loss = loss / bn;

    let mut grad = log_p.mapv(|lp| lp.exp());
    for (bi, &y) in labels.iter().enumerate() {
        grad[[bi, y]] -= F::one();
    }
    grad.mapv_inplace(|v| v / bn);
    (loss, grad)
}

/// Mean squared error over all elements. Returns (loss, dL/da); the gradient
/// w.r.t. `b` is the negation.
pub fn mse<F: Scalar>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> (F, Array2<F>) {
    assert_eq!(a.dim(), b.dim(), "mse shape mismatch");
    let n = F::from_f64(a.len() as f64);
    let diff = &a - &b;
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let two = F::from_f64(2.0);
    let grad = diff.mapv(|d| two * d / n);
    (loss, grad)
}

/// Accuracy of argmax predictions against integer labels.
pub fn accuracy<F: Scalar>(logits: ArrayView2<'_, F>, labels: &[usize]) -> f64 {
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels.iter())
        .filter(|(row, &y)| {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            pred == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Argmax per row.
pub fn argmax_rows<F: Scalar>(logits: ArrayView2<'_, F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_hand_value_and_gradcheck() {
        let logits = array![[1.0f64, 2.0, 0.5], [0.0, 0.0, 0.0]];
        let labels = [1usize, 2];
        let (loss, grad) = cross_entropy(logits.view(), &labels);

        // independent evaluation from the definition
        let mut expect = 0.0;
        for (bi, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(bi).to_vec();
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            expect -= row[y] - max - z.ln();
        }
        expect /= 2.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);

        // finite-difference gradient
        let h = 1e-6;
        let mut lp = logits.clone();
        for idx in 0..logits.len() {
            let orig = lp.as_slice().unwrap()[idx];
            lp.as_slice_mut().unwrap()[idx] = orig + h;
            let (l1, _) = cross_entropy(lp.view(), &labels);
            lp.as_slice_mut().unwrap()[idx] = orig - h;
            let (l2, _) = cross_entropy(lp.view(), &labels);
            lp.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!((l1 - l2) / (2.0 * h), grad.as_slice().unwrap()[idx], epsilon = 1e-6);
        }
    }

    #[test]
    fn mse_basic() {
        let a = array![[1.0f64, 2.0]];
        let b = array![[1.0f64, 0.0]];
        let (loss, grad) = mse(a.view(), b.view());
        assert_abs_diff_eq!(loss, 2.0);
        assert_abs_diff_eq!(grad[[0, 0]], 0.0);
        assert_abs_diff_eq!(grad[[0, 1]], 2.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[5.0f64, -3.0, 40.0], [0.0, 0.0, 0.0]];
        let p = softmax_rows(z.view(), 1.0);
        for row in p.outer_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }
}
