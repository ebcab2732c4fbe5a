//! Training losses. Each returns `(mean_loss, dloss/dlogits)` so callers
//! feed the gradient straight into [`Net::backward`](super::Net::backward).

use ndarray::{Array2, ArrayD};

use super::{ff, Float};

/// Row-wise softmax with max subtraction.
pub fn softmax<F: Float>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy between `logits` `(N, C)` and integer `labels`.
///
/// The loss is computed in log space (`logsumexp(z) - z[y]`) and the
/// returned gradient is `(softmax(z) - onehot(y)) / N`.
pub fn softmax_cross_entropy<F: Float>(
    logits: &Array2<F>,
    labels: &[u8],
) -> (F, Array2<F>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "batch size mismatch");
    let inv_n = ff::<F>(1.0) / ff::<F>(n as f64);
    let mut loss = F::zero();
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = max
            + row
                .iter()
                .map(|&v| (v - max).exp())
                .fold(F::zero(), |a, b| a + b)
                .ln();
        loss = loss + (lse - row[label as usize]);
    }
    let mut grad = softmax(logits);
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        row[label as usize] = row[label as usize] - F::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    (loss * inv_n, grad)
}

/// Mean binary cross-entropy on raw logits against targets in `[0, 1]`.
///
/// Fusing the sigmoid keeps the loss finite for any logit:
/// `l = max(z, 0) - z t + ln(1 + exp(-|z|))`, gradient `(sigma(z) - t) / N`.
pub fn bce_with_logits<F: Float>(logits: &ArrayD<F>, targets: &ArrayD<F>) -> (F, ArrayD<F>) {
    assert_eq!(logits.shape(), targets.shape(), "shape mismatch");
    let n = ff::<F>(logits.len() as f64);
    let mut loss = F::zero();
    let mut grad = logits.clone();
    grad.zip_mut_with(targets, |z, &t| {
        let zv = *z;
        let pos = if zv > F::zero() { zv } else { F::zero() };
        loss = loss + pos - zv * t + ((-zv.abs()).exp() + F::one()).ln();
        let sig = if zv >= F::zero() {
            F::one() / (F::one() + (-zv).exp())
        } else {
            let e = zv.exp();
            e / (F::one() + e)
        };
        *z = (sig - t) / n;
    });
    (loss / n, grad)
}
