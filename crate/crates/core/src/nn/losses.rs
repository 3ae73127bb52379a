//! Loss functions. Each returns the scalar loss together with the gradient
//! with respect to its first argument, averaged over contributing elements.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy between rows of logits and integer targets.
///
/// Returns zero loss and an empty gradient for zero rows, so heads with no
/// contributing elements drop out of a joint objective cleanly.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> (S, Tensor<S>) {
    let (rows, cols) = logits.dims2();
    assert_eq!(rows, targets.len(), "one target per logit row");
    if rows == 0 {
        return (S::zero(), Tensor::zeros(&[0, cols]));
    }
    let count = S::from_usize(rows);
    let mut grad = Tensor::zeros(&[rows, cols]);
    let mut loss = S::zero();
    for r in 0..rows {
        let x = logits.row(r);
        let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for &v in x {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        let target = targets[r];
        assert!(target < cols, "target {target} out of range {cols}");
        loss += log_sum - x[target];
        let g = &mut grad.data_mut()[r * cols..(r + 1) * cols];
        for (c, gv) in g.iter_mut().enumerate() {
            let softmax = (x[c] - log_sum).exp();
            *gv = softmax / count;
        }
        g[target] -= S::one() / count;
    }
    (loss / count, grad)
}

/// Mean squared error over all elements; gradient is with respect to the
/// prediction side only.
pub fn mse<S: Scalar>(prediction: &Tensor<S>, target: &Tensor<S>) -> (S, Tensor<S>) {
    assert_eq!(prediction.shape(), target.shape(), "mse shape mismatch");
    let count = S::from_usize(prediction.len().max(1));
    let mut grad = Tensor::zeros(prediction.shape());
    let mut loss = S::zero();
    let two = S::from_f64(2.0);
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(prediction.data())
        .zip(target.data())
    {
        let d = p - t;
        loss += d * d;
        *g = two * d / count;
    }
    (loss / count, grad)
}
