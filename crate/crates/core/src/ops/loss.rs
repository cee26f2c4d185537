use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.shape() {
        [_, k] => k,
        _ => return Err(dim_err!("softmax expects n×k logits, got {:?}", logits.shape())),
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean categorical cross-entropy of softmax probabilities against one-hot
/// labels. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(dim_err!("cross-entropy expects n×k logits, got {:?}", logits.shape())),
    };
    if labels.shape() != logits.shape() {
        return Err(dim_err!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        ));
    }
    if k < 2 {
        return Err(invalid!("cross-entropy needs at least two classes, got {k}"));
    }
    let mut total = T::zero();
    for (i, (row, lab)) in logits.data().chunks(k).zip(labels.data().chunks(k)).enumerate() {
        let target = one_hot_index(lab).ok_or_else(|| invalid!("label row {i} is not one-hot: {lab:?}"))?;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[target];
    }
    let probs = softmax(logits)?;
    Ok((total / T::from_usize(n).expect("batch size"), probs))
}

/// Combined softmax + cross-entropy gradient, `(probs − labels) / n`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != labels.shape() || probs.rank() != 2 {
        return Err(dim_err!(
            "probabilities {:?} and labels {:?} must be equal n×k",
            probs.shape(),
            labels.shape()
        ));
    }
    let n = T::from_usize(probs.shape()[0]).expect("batch size");
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| (p - y) / n)
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

fn one_hot_index<T: Scalar>(row: &[T]) -> Option<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == T::one() {
            if hot.is_some() {
                return None;
            }
            hot = Some(j);
        } else if v != T::zero() {
            return None;
        }
    }
    hot
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(n: usize, k: usize, idx: &[usize]) -> Tensor<f64> {
        Tensor::from_fn([n, k], |i| if idx[i / k] == i % k { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros([3, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &one_hot(3, 4, &[0, 1, 3])).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn huge_margin_is_stable() {
        let logits = Tensor::new([1, 4], vec![1000.0f32, 0.0, 0.0, 0.0]).unwrap();
        let labels = Tensor::new([1, 4], vec![1.0f32, 0.0, 0.0, 0.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(probs.all_finite());
    }

    #[test]
    fn rejects_soft_labels() {
        let logits = Tensor::<f32>::zeros([1, 3]);
        let labels = Tensor::new([1, 3], vec![0.5f32, 0.5, 0.0]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &labels),
            Err(crate::Error::Validation(_))
        ));
        let labels = Tensor::<f32>::zeros([1, 3]);
        assert!(softmax_cross_entropy(&logits, &labels).is_err());
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let logits = Tensor::from_fn([5, 4], |i| ((i * 37) % 11) as f32 - 5.0);
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
