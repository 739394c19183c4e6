use crate::error::{Error, Result};

/// Weighted mean squared error `(1/N) sum w_i (pred_i - target_i)^2` and its
/// gradient with respect to `pred`.
pub fn weighted_mse(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = pred.len();
    if n == 0 || target.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "loss inputs have lengths {}, {}, {}",
            n,
            target.len(),
            weights.len()
        )));
    }
    let nf = n as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| {
            let e = p - t;
            loss += w * e * e;
            2.0 * w * e / nf
        })
        .collect();
    Ok((loss / nf, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_values() {
        let (l, g) = weighted_mse(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert_eq!(l, (1.0 + 12.0) / 2.0);
        assert_eq!(g, vec![1.0, 6.0]);
    }

    #[test]
    fn unit_weights_reduce_to_mse() {
        let p = [0.3, -1.2, 2.5];
        let t = [0.1, 0.0, 2.0];
        let (l, _) = weighted_mse(&p, &t, &[1.0; 3]).unwrap();
        let mse = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0;
        assert!((l - mse).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_has_zero_loss_and_gradient() {
        let (l, g) = weighted_mse(&[1.0, -2.0], &[1.0, -2.0], &[0.5, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let p = [0.3, -1.2, 2.5];
        let t = [0.1, 0.0, 2.0];
        let (a, _) = weighted_mse(&p, &t, &[0.7, 1.1, 2.0]).unwrap();
        let (b, _) = weighted_mse(&p, &t, &[1.4, 2.2, 4.0]).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(weighted_mse(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
        assert!(weighted_mse(&[], &[], &[]).is_err());
    }
}
