use super::tensor::{Scalar, Tensor};

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let c = logits.row_len();
    for row in out.data.chunks_mut(c) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp_neg());
        let sum: T = row.iter().cloned().sum();
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> (f64, Tensor<T>) {
    let b = logits.rows();
    let c = logits.row_len();
    assert_eq!(labels.len(), b, "one label per row");
    let mut grad = logits.clone();
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = 0.0f64;
    for (row, &y) in grad.data.chunks_mut(c).zip(labels) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let zy = row[y as usize] - max;
        row.iter_mut().for_each(|v| *v = (*v - max).exp_neg());
        let sum: T = row.iter().cloned().sum();
        loss += sum.f64().ln() - zy.f64();
        let scale = inv_b / sum;
        row.iter_mut().for_each(|v| *v *= scale);
        row[y as usize] -= inv_b;
    }
    (loss / b as f64, grad)
}

/// Mean cross-entropy of already-normalized probabilities.
pub fn cross_entropy_of_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> f64 {
    let c = probs.row_len();
    let total: f64 = probs
        .data
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| -(row[y as usize].f64().max(1e-300)).ln())
        .sum();
    total / labels.len() as f64
}
