//! Dense symmetric positive-definite helpers on row-major `d x d` storage.

/// Lower Cholesky factor of `a`, or `None` if `a` is not positive definite.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `log |A|` from its Cholesky factor.
pub fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>()
}

/// Squared Mahalanobis norm `v^T A^{-1} v` by forward substitution on `L`.
pub fn mahalanobis_sq(l: &[f64], d: usize, v: &[f64], scratch: &mut [f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        let mut s = v[i];
        for k in 0..i {
            s -= l[i * d + k] * scratch[k];
        }
        let y = s / l[i * d + i];
        scratch[i] = y;
        acc += y * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs_matrix() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn mahalanobis_on_diagonal() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let l = cholesky(&a, 2).unwrap();
        let mut s = [0.0; 2];
        let m = mahalanobis_sq(&l, 2, &[2.0, 3.0], &mut s);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((log_det_from_cholesky(&l, 2) - 36.0f64.ln()).abs() < 1e-12);
    }
}
