//! Central finite-difference gradient checks.

/// Largest relative discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Error between an analytic and a numeric derivative. Relative to the larger
/// magnitude, falling back to the absolute difference when both are below
/// `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

/// Perturbs each parameter by `±step`, evaluates `loss`, and compares the
/// central difference with `analytic`. `params` is restored on return.
pub fn check_gradients(
    params: &mut [f64],
    analytic: &[f64],
    step: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let up = loss(params);
        params[i] = orig - step;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric, 1e-7);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{
        weighted_mse, DenseLayer, LstmActivation, LstmLayer, ParamBlock, Tensor2,
    };
    use crate::rng;
    use rand::Rng as _;

    fn random_tensor(rows: usize, cols: usize, r: &mut crate::rng::Rng) -> Tensor2 {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn cubic_is_checked_exactly() {
        let mut p = vec![0.7, -1.3];
        let analytic: Vec<f64> = p.iter().map(|x| 3.0 * x * x).collect();
        let rep = check_gradients(&mut p, &analytic, 1e-5, |q| q.iter().map(|x| x * x * x).sum());
        assert!(rep.max_relative_error < 1e-8);
        assert_eq!(p, vec![0.7, -1.3]);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut p = vec![2.0];
        let rep = check_gradients(&mut p, &[1.0], 1e-5, |q| q[0] * q[0]);
        assert!(rep.max_relative_error > 0.5);
    }

    fn lstm_case(seed: u64, return_sequences: bool, activation: LstmActivation) -> f64 {
        let mut r = rng::seeded(seed);
        let (input, hidden, steps, batch) = (3, 2, 4, 3);
        let layer = LstmLayer::new(input, hidden, return_sequences, activation, &mut r);
        let xs: Vec<Tensor2> = (0..steps).map(|_| random_tensor(batch, input, &mut r)).collect();
        let n_out = if return_sequences { steps } else { 1 };
        let targets: Vec<Tensor2> = (0..n_out).map(|_| random_tensor(batch, hidden, &mut r)).collect();

        // loss = 0.5 * sum (out - target)^2 so upstream = out - target
        let eval = |layer: &LstmLayer| -> (f64, Vec<Tensor2>) {
            let (out, _) = layer.forward(&xs).unwrap();
            let outs = out.into_sequence();
            let mut loss = 0.0;
            let ups = outs
                .iter()
                .zip(&targets)
                .map(|(o, t)| {
                    let mut g = o.clone();
                    for (gv, tv) in g.data.iter_mut().zip(&t.data) {
                        *gv -= tv;
                        loss += 0.5 * *gv * *gv;
                    }
                    g
                })
                .collect();
            (loss, ups)
        };
        let (_, ups) = eval(&layer);
        let (_, cache) = layer.forward(&xs).unwrap();
        let grads = layer.backward(&cache, &ups).unwrap();

        let mut params = layer.params().to_vec();
        let rep = check_gradients(&mut params, &grads.params, 1e-5, |p| {
            let l = LstmLayer::from_params(input, hidden, return_sequences, activation, p.to_vec())
                .unwrap();
            eval(&l).0
        });

        // input gradients
        let mut flat: Vec<f64> = xs.iter().flat_map(|x| x.data.clone()).collect();
        let analytic: Vec<f64> = grads.inputs.iter().flat_map(|x| x.data.clone()).collect();
        let params = layer.params().to_vec();
        let rep_x = check_gradients(&mut flat, &analytic, 1e-5, |f| {
            let xs2: Vec<Tensor2> = f
                .chunks(batch * input)
                .map(|c| Tensor2::from_vec(batch, input, c.to_vec()).unwrap())
                .collect();
            let l = LstmLayer::from_params(input, hidden, return_sequences, activation, params.clone())
                .unwrap();
            let outs = l.forward(&xs2).unwrap().0.into_sequence();
            outs.iter()
                .zip(&targets)
                .flat_map(|(o, t)| o.data.iter().zip(&t.data).map(|(a, b)| 0.5 * (a - b).powi(2)))
                .sum()
        });
        rep.max_relative_error.max(rep_x.max_relative_error)
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..10 {
            for rs in [true, false] {
                for act in [LstmActivation::Tanh, LstmActivation::Relu] {
                    let err = lstm_case(seed, rs, act);
                    assert!(err < 1e-4, "seed {seed} seq {rs} {act:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut r = rng::seeded(100 + seed);
            let relu = seed % 2 == 0;
            let layer = DenseLayer::new(4, 3, relu, &mut r);
            let x = random_tensor(5, 4, &mut r);
            let target: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
            let w = vec![1.0; 15];
            let (y, cache) = layer.forward(&x).unwrap();
            let (_, g) = weighted_mse(&y.data, &target, &w).unwrap();
            let grads = layer
                .backward(&cache, &Tensor2::from_vec(5, 3, g).unwrap())
                .unwrap();
            let mut params = layer.params().to_vec();
            let rep = check_gradients(&mut params, &grads.params, 1e-5, |p| {
                let l = DenseLayer::from_params(4, 3, relu, p.to_vec()).unwrap();
                let (y, _) = l.forward(&x).unwrap();
                weighted_mse(&y.data, &target, &w).unwrap().0
            });
            assert!(rep.max_relative_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }
}
