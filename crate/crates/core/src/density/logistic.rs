//! L2-regularized logistic regression fitted by full-batch gradient descent.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticRegression {
    /// Step size is `1 / L` with `L` bounded by a quarter of the trace of the
    /// design Gram matrix, so every step decreases the penalized loss.
    pub fn fit(x: &[Vec<f64>], y: &[bool], l2: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", n, y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged design matrix".into()));
        }
        let trace: f64 = 1.0 + x.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64;
        let step = 1.0 / (0.25 * trace + l2);

        let mut w = vec![0.0; d + 1];
        let mut grad = vec![0.0; d + 1];
        let mut iterations = 0;
        for it in 0..max_iter {
            iterations = it + 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in x.iter().zip(y) {
                let z = w[0] + row.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
                let r = sigmoid(z) - if label { 1.0 } else { 0.0 };
                grad[0] += r;
                for (g, v) in grad[1..].iter_mut().zip(row) {
                    *g += r * v;
                }
            }
            for g in grad.iter_mut() {
                *g /= n as f64;
            }
            for (g, wv) in grad[1..].iter_mut().zip(&w[1..]) {
                *g += l2 * wv;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= step * g;
            }
            if norm < tol {
                break;
            }
        }
        Ok(Self {
            coefficients: w,
            iterations,
        })
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let z = self.coefficients[0]
            + row
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_matches_base_rate() {
        let x = vec![vec![]; 40];
        let y: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let m = LogisticRegression::fit(&x, &y, 1e-4, 5000, 1e-10).unwrap();
        assert!((m.predict_proba(&[]) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn separates_by_sign() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 99.5) / 50.0]).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] > 0.0).collect();
        let m = LogisticRegression::fit(&x, &y, 1e-4, 5000, 1e-8).unwrap();
        assert!(m.predict_proba(&[1.5]) > 0.9);
        assert!(m.predict_proba(&[-1.5]) < 0.1);
    }
}
