use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scalar loss with its gradient w.r.t. the network output.
#[derive(Clone, Debug)]
pub struct LossOutput<S> {
    pub loss: S,
    pub grad: Vec<S>,
}

/// Mean over the batch of `(target_n - q[n, action_n])^2`; only the selected
/// entries of `q` receive gradient.
pub fn mse_selected<S: Scalar>(q: &[S], width: usize, actions: &[usize], targets: &[S]) -> Result<LossOutput<S>> {
    let n = actions.len();
    if targets.len() != n {
        return Err(Error::dim("mse", "target count", n, targets.len()));
    }
    if q.len() != n * width {
        return Err(Error::dim("mse", "q rows", n * width, q.len()));
    }
    let inv = S::one() / S::lit(n.max(1) as f64);
    let mut grad = vec![S::zero(); q.len()];
    let mut loss = S::zero();
    for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        if a >= width {
            return Err(Error::dim("mse", "action index", width, a));
        }
        let diff = q[i * width + a] - y;
        loss += diff * diff * inv;
        grad[i * width + a] = S::lit(2.0) * diff * inv;
    }
    Ok(LossOutput { loss, grad })
}

/// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
pub fn cross_entropy<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> Result<LossOutput<S>> {
    let n = labels.len();
    if logits.len() != n * classes {
        return Err(Error::dim("cross_entropy", "logit rows", n * classes, logits.len()));
    }
    let inv = S::one() / S::lit(n.max(1) as f64);
    let mut grad = vec![S::zero(); logits.len()];
    let mut loss = S::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::dim("cross_entropy", "label", classes, label));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += (log_sum - row[label]) * inv;
        for (k, &z) in row.iter().enumerate() {
            let p = (z - log_sum).exp();
            let t = if k == label { S::one() } else { S::zero() };
            grad[i * classes + k] = (p - t) * inv;
        }
    }
    Ok(LossOutput { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = vec![0.3f64; 4 * 10];
        let out = cross_entropy(&logits, 10, &[0, 3, 9, 5]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_touches_selected_actions_only() {
        let q = vec![1.0f64, 2.0, 3.0, 4.0];
        let out = mse_selected(&q, 2, &[1, 0], &[0.0, 5.0]).unwrap();
        // ((2-0)^2 + (3-5)^2) / 2
        assert_eq!(out.loss, 4.0);
        assert_eq!(out.grad, vec![0.0, 2.0, -2.0, 0.0]);
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        let logits = vec![5.0f32, -3.0, 0.5, 100.0, -100.0, 2.0];
        let out = cross_entropy(&logits, 3, &[0, 1]).unwrap();
        assert!(out.loss >= 0.0 && out.loss.is_finite());
    }
}
