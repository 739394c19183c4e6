use rand::Rng as _;

use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so the
/// expected activation matches evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

/// Per-unit multipliers drawn for one forward pass; `None` when inactive.
#[derive(Debug, Clone)]
pub struct DropoutMask(Option<Vec<f64>>);

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Identity unless `active`; `rng` is consumed only when a mask is drawn.
    pub fn forward(&self, x: &Tensor2, active: bool, rng: &mut Rng) -> (Tensor2, DropoutMask) {
        if !active || self.rate == 0.0 {
            return (x.clone(), DropoutMask(None));
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.data.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut y = x.clone();
        y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        (y, DropoutMask(Some(mask)))
    }

    pub fn backward(&self, mask: &DropoutMask, upstream: &Tensor2) -> Tensor2 {
        match &mask.0 {
            None => upstream.clone(),
            Some(m) => {
                let mut g = upstream.clone();
                g.data.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn rate_of_one_is_rejected() {
        assert!(matches!(Dropout::new(1.0), Err(Error::Config(_))));
        assert!(matches!(Dropout::new(-0.1), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_mode_is_identity() {
        let d = Dropout::new(0.5).unwrap();
        let x = Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = d.forward(&x, false, &mut rng::seeded(0));
        assert_eq!(y, x);
    }

    #[test]
    fn zero_rate_is_identity_in_training_mode() {
        let d = Dropout::new(0.0).unwrap();
        let x = Tensor2::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let (y, _) = d.forward(&x, true, &mut rng::seeded(0));
        assert_eq!(y, x);
    }

    #[test]
    fn half_rate_keeps_half_and_doubles_survivors() {
        let d = Dropout::new(0.5).unwrap();
        let x = Tensor2::from_vec(1, 50_000, vec![1.5; 50_000]).unwrap();
        let (y, _) = d.forward(&x, true, &mut rng::seeded(9));
        let kept: Vec<f64> = y.data.iter().copied().filter(|&v| v != 0.0).collect();
        assert!((kept.len() as f64 / 5e4 - 0.5).abs() < 0.02);
        assert!(kept.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn training_mode_preserves_expectation() {
        let d = Dropout::new(0.2).unwrap();
        let x = Tensor2::from_vec(1, 100_000, vec![1.0; 100_000]).unwrap();
        let (y, _) = d.forward(&x, true, &mut rng::seeded(4));
        let mean = y.data.iter().sum::<f64>() / y.data.len() as f64;
        assert!((mean - 1.0).abs() < 0.01);
        let zeros = y.data.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.2).abs() < 0.01);
    }
}
