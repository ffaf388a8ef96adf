//! Softmax cross-entropy.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over the batch of `-log softmax(logits)[label]`, and its gradient
/// with respect to `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, k] = match *logits.shape() {
        [b, k] => [b, k],
        _ => return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len(), 0])),
    };
    if b != labels.len() || b == 0 {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, n_classes: k });
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let top = argmax(row);
        let max = row[top];
        // log(1 + sum of the non-maximal terms)
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &z)| libm::exp(z - max))
            .sum();
        let log_sum = libm::log1p(rest);
        total += log_sum - (row[label] - max);
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = libm::exp(z - max - log_sum) * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Index of the largest logit in every row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.last_dim().max(1);
    logits
        .data()
        .chunks_exact(k)
        .map(argmax)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_log_classes() {
        let (l, _) = cross_entropy(&Tensor::zeros(&[2, 7]), &[0, 3]).unwrap();
        assert!((l - libm::log(7.0)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        assert_eq!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err(),
            Error::Label { label: 3, n_classes: 3 }
        );
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 1.0, 1.0, -1.0]).unwrap();
        let (_, g) = cross_entropy(&x, &[2, 0]).unwrap();
        for row in g.data().chunks_exact(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_first_on_ties() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, -1.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&x), [0, 1]);
    }
}
