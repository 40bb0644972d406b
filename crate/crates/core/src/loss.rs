//! Label-smoothed cross-entropy.
//!
//! The differentiable version lives on the graph as [`Graph::cross_entropy`];
//! this module exposes the plain evaluation used by reports and tests.
//!
//! [`Graph::cross_entropy`]: crate::autodiff::Graph::cross_entropy

use crate::autodiff::cross_entropy_forward;
use crate::error::{G2pError, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over rows of `-sum_v q_v log p_v`, with
/// `q = (1 - epsilon) * onehot(target) + epsilon / V`.
pub fn cross_entropy_label_smoothed<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let (k, _) = logits.dims2()?;
    if targets.len() != k {
        return Err(G2pError::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(G2pError::Config(format!("label smoothing {epsilon} not in [0, 1)")));
    }
    cross_entropy_forward(logits, targets, epsilon).map(|(loss, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation with explicit probabilities, no log-sum-exp.
    fn oracle(logits: &[Vec<f64>], targets: &[usize], eps: f64) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.iter().zip(targets) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let v = row.len() as f64;
            for (c, x) in row.iter().enumerate() {
                let p = x.exp() / z;
                let q = if c == t { 1.0 - eps + eps / v } else { eps / v };
                total -= q * p.ln();
            }
        }
        total / logits.len() as f64
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let loss = cross_entropy_label_smoothed(&logits, &[0, 1, 3], 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn peaked_logits_match_direct_sum() {
        let rows = vec![vec![12.0, 0.5, -1.0, 0.0], vec![-2.0, 0.0, 15.0, 1.0]];
        let logits = Tensor::<f64>::from_rows(&rows).unwrap();
        let loss = cross_entropy_label_smoothed(&logits, &[0, 2], 0.1).unwrap();
        assert!((loss - oracle(&rows, &[0, 2], 0.1)).abs() < 1e-12);
        // gold mass near one: the loss is dominated by the smoothed off-gold terms
        let off_gold: f64 = rows[0][1..].iter().map(|x| -(x - 12.0) * 0.1 / 4.0).sum();
        assert!((cross_entropy_label_smoothed(&Tensor::<f64>::from_rows(&rows[..1]).unwrap(), &[0], 0.1).unwrap()
            - off_gold)
            .abs()
            < 1e-4);
    }

    #[test]
    fn shift_invariance() {
        let rows = vec![vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5]];
        let a = Tensor::<f64>::from_rows(&rows).unwrap();
        let b = a.map(|v| v + 7.5);
        let la = cross_entropy_label_smoothed(&a, &[2, 0], 0.1).unwrap();
        let lb = cross_entropy_label_smoothed(&b, &[2, 0], 0.1).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy_label_smoothed(&logits, &[3], 0.1),
            Err(G2pError::Index { .. })
        ));
    }
}
