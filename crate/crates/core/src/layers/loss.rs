use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (batch, n) = logits.dims2("softmax_xent")?;
    if labels.len() != batch {
        return Err(Error::dim("softmax_xent labels", &[labels.len()], &[batch]));
    }
    let inv_batch = T::one() / T::from_usize(batch);
    let mut grad = vec![T::zero(); batch * n];
    let mut total = T::zero();
    let mut probs = vec![T::zero(); n];
    for (r, &label) in labels.iter().enumerate() {
        if label >= n {
            return Err(Error::Index { index: label, bound: n });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        // entries equal to the max shift to exactly zero, so an infinite max stays finite
        let shifted = |v: T| if v == max { T::zero() } else { v - max };
        let mut sum = T::zero();
        for (p, &v) in probs.iter_mut().zip(row) {
            *p = shifted(v).exp();
            sum += *p;
        }
        total += sum.ln() - shifted(row[label]);
        let g = &mut grad[r * n..(r + 1) * n];
        for (j, (gv, &p)) in g.iter_mut().zip(&probs).enumerate() {
            let onehot = if j == label { T::one() } else { T::zero() };
            *gv = (p / sum - onehot) * inv_batch;
        }
    }
    Ok((total * inv_batch, Tensor::new(vec![batch, n], grad)?))
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (batch, _) = logits.dims2("argmax_rows")?;
    Ok((0..batch)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
