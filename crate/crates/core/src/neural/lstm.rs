//! LSTM layer with explicit backpropagation through time.
//!
//! Gate rows are stacked as `[input, forget, candidate, output]`, each
//! `hidden` rows tall. Parameters live in one flat buffer laid out as the
//! input kernel `W (4h x in)`, the recurrent kernel `U (4h x h)` and the bias
//! `b (4h)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, sigmoid, Tensor2};
use super::{next_layer_id, ParamBlock};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// What the layer emits from each hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LstmActivation {
    /// ReLU applied to the emitted hidden state; the recurrence itself keeps
    /// sigmoid gates and tanh cell activations.
    #[default]
    Relu,
    /// Emit the hidden state unchanged.
    Tanh,
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    pub return_sequences: bool,
    pub activation: LstmActivation,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    layer_id: u64,
    version: u64,
    batch: usize,
    inputs: Vec<Tensor2>,
    /// `h_{-1} = 0` followed by every raw hidden state.
    hidden: Vec<Tensor2>,
    cells: Vec<Tensor2>,
    /// Post-activation gates, `batch x 4h`, per step.
    gates: Vec<Tensor2>,
    tanh_cells: Vec<Tensor2>,
}

/// Gradients from [`LstmLayer::backward`]: parameters in buffer layout and
/// one input gradient per step.
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub params: Vec<f64>,
    pub inputs: Vec<Tensor2>,
}

/// Layer output: every step when `return_sequences`, otherwise the last one.
#[derive(Debug, Clone, PartialEq)]
pub enum LstmOutput {
    Sequence(Vec<Tensor2>),
    Last(Tensor2),
}

impl LstmOutput {
    pub fn into_sequence(self) -> Vec<Tensor2> {
        match self {
            LstmOutput::Sequence(s) => s,
            LstmOutput::Last(t) => vec![t],
        }
    }

    pub fn into_last(self) -> Tensor2 {
        match self {
            LstmOutput::Sequence(mut s) => s.pop().expect("non-empty sequence"),
            LstmOutput::Last(t) => t,
        }
    }
}

impl LstmLayer {
    pub fn param_count(input_size: usize, hidden_size: usize) -> usize {
        4 * hidden_size * (input_size + hidden_size + 1)
    }

    /// Glorot-uniform kernels, zero bias except a forget-gate bias of 1.
    pub fn new(
        input_size: usize,
        hidden_size: usize,
        return_sequences: bool,
        activation: LstmActivation,
        rng: &mut Rng,
    ) -> Self {
        let h4 = 4 * hidden_size;
        let mut params = Vec::with_capacity(Self::param_count(input_size, hidden_size));
        let lim_w = (6.0 / (input_size + h4) as f64).sqrt();
        params.extend((0..h4 * input_size).map(|_| rng.random_range(-lim_w..lim_w)));
        let lim_u = (6.0 / (hidden_size + h4) as f64).sqrt();
        params.extend((0..h4 * hidden_size).map(|_| rng.random_range(-lim_u..lim_u)));
        params.extend((0..h4).map(|i| {
            if (hidden_size..2 * hidden_size).contains(&i) {
                1.0
            } else {
                0.0
            }
        }));
        Self::from_params(input_size, hidden_size, return_sequences, activation, params)
            .expect("sized by construction")
    }

    pub fn from_params(
        input_size: usize,
        hidden_size: usize,
        return_sequences: bool,
        activation: LstmActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_count(input_size, hidden_size);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "LSTM {input_size}->{hidden_size} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            input_size,
            hidden_size,
            return_sequences,
            activation,
            params,
            id: next_layer_id(),
            version: 0,
        })
    }

    fn split(&self) -> (&[f64], &[f64], &[f64]) {
        let h4 = 4 * self.hidden_size;
        let (w, rest) = self.params.split_at(h4 * self.input_size);
        let (u, b) = rest.split_at(h4 * self.hidden_size);
        (w, u, b)
    }

    pub fn forward(&self, inputs: &[Tensor2]) -> Result<(LstmOutput, LstmCache)> {
        if inputs.is_empty() {
            return Err(Error::Shape("LSTM needs at least one time step".into()));
        }
        let batch = inputs[0].rows;
        for (t, x) in inputs.iter().enumerate() {
            if x.cols != self.input_size || x.rows != batch {
                return Err(Error::Shape(format!(
                    "step {t} input is {}x{}, expected {batch}x{}",
                    x.rows, x.cols, self.input_size
                )));
            }
        }
        let h = self.hidden_size;
        let h4 = 4 * h;
        let (w, u, b) = self.split();

        let mut hidden = vec![Tensor2::zeros(batch, h)];
        let mut cells = vec![Tensor2::zeros(batch, h)];
        let mut gates_all = Vec::with_capacity(inputs.len());
        let mut tanh_cells = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());

        for x in inputs {
            let mut z = Tensor2::zeros(batch, h4);
            for r in 0..batch {
                z.data[r * h4..(r + 1) * h4].copy_from_slice(b);
            }
            gemm(batch, self.input_size, h4, 1.0, &x.data, false, w, true, 1.0, &mut z.data);
            let h_prev = hidden.last().unwrap();
            gemm(batch, h, h4, 1.0, &h_prev.data, false, u, true, 1.0, &mut z.data);

            let c_prev = cells.last().unwrap();
            let mut c = Tensor2::zeros(batch, h);
            let mut hn = Tensor2::zeros(batch, h);
            let mut tc = Tensor2::zeros(batch, h);
            for r in 0..batch {
                let zr = &mut z.data[r * h4..(r + 1) * h4];
                for j in 0..h {
                    let i_g = sigmoid(zr[j]);
                    let f_g = sigmoid(zr[h + j]);
                    let g_g = zr[2 * h + j].tanh();
                    let o_g = sigmoid(zr[3 * h + j]);
                    zr[j] = i_g;
                    zr[h + j] = f_g;
                    zr[2 * h + j] = g_g;
                    zr[3 * h + j] = o_g;
                    let cv = f_g * c_prev.data[r * h + j] + i_g * g_g;
                    let tcv = cv.tanh();
                    c.data[r * h + j] = cv;
                    tc.data[r * h + j] = tcv;
                    hn.data[r * h + j] = o_g * tcv;
                }
            }
            outputs.push(match self.activation {
                LstmActivation::Relu => hn.map(|v| v.max(0.0)),
                LstmActivation::Tanh => hn.clone(),
            });
            debug_assert!(hn.all_finite());
            gates_all.push(z);
            hidden.push(hn);
            cells.push(c);
            tanh_cells.push(tc);
        }

        let cache = LstmCache {
            layer_id: self.id,
            version: self.version,
            batch,
            inputs: inputs.to_vec(),
            hidden,
            cells,
            gates: gates_all,
            tanh_cells,
        };
        let out = if self.return_sequences {
            LstmOutput::Sequence(outputs)
        } else {
            LstmOutput::Last(outputs.pop().unwrap())
        };
        Ok((out, cache))
    }

    /// `upstream` holds one gradient per emitted step: all steps for a
    /// sequence layer, only the last for a many-to-one layer.
    pub fn backward(&self, cache: &LstmCache, upstream: &[Tensor2]) -> Result<LstmGrads> {
        if cache.layer_id != self.id || cache.version != self.version {
            return Err(Error::State(
                "LSTM cache was produced by different parameters".into(),
            ));
        }
        let steps = cache.inputs.len();
        let expected = if self.return_sequences { steps } else { 1 };
        if upstream.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} upstream gradients, got {}",
                upstream.len()
            )));
        }
        let batch = cache.batch;
        let h = self.hidden_size;
        let h4 = 4 * h;
        for g in upstream {
            if g.shape() != (batch, h) {
                return Err(Error::Shape(format!(
                    "upstream gradient is {}x{}, expected {batch}x{h}",
                    g.rows, g.cols
                )));
            }
        }
        let (w, u, _) = self.split();
        let n_w = h4 * self.input_size;
        let n_u = h4 * h;
        let mut grads = vec![0.0; self.params.len()];
        let mut d_inputs = vec![Tensor2::zeros(batch, self.input_size); steps];
        let mut dh_next = Tensor2::zeros(batch, h);
        let mut dc_next = Tensor2::zeros(batch, h);
        let mut dz = Tensor2::zeros(batch, h4);

        for t in (0..steps).rev() {
            let up = if self.return_sequences {
                Some(&upstream[t])
            } else if t == steps - 1 {
                Some(&upstream[0])
            } else {
                None
            };
            let h_t = &cache.hidden[t + 1];
            let c_prev = &cache.cells[t];
            let gates = &cache.gates[t];
            let tc = &cache.tanh_cells[t];
            for r in 0..batch {
                for j in 0..h {
                    let idx = r * h + j;
                    let mut dh = dh_next.data[idx];
                    if let Some(up) = up {
                        let pass = match self.activation {
                            LstmActivation::Relu => h_t.data[idx] > 0.0,
                            LstmActivation::Tanh => true,
                        };
                        if pass {
                            dh += up.data[idx];
                        }
                    }
                    let g = &gates.data[r * h4..(r + 1) * h4];
                    let (i_g, f_g, g_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tcv = tc.data[idx];
                    let d_o = dh * tcv;
                    let dc = dh * o_g * (1.0 - tcv * tcv) + dc_next.data[idx];
                    let d_i = dc * g_g;
                    let d_g = dc * i_g;
                    let d_f = dc * c_prev.data[idx];
                    dc_next.data[idx] = dc * f_g;
                    let dzr = &mut dz.data[r * h4..(r + 1) * h4];
                    dzr[j] = d_i * i_g * (1.0 - i_g);
                    dzr[h + j] = d_f * f_g * (1.0 - f_g);
                    dzr[2 * h + j] = d_g * (1.0 - g_g * g_g);
                    dzr[3 * h + j] = d_o * o_g * (1.0 - o_g);
                }
            }
            let x = &cache.inputs[t];
            let h_prev = &cache.hidden[t];
            let (gw, rest) = grads.split_at_mut(n_w);
            let (gu, gb) = rest.split_at_mut(n_u);
            // dW += dz^T x ; dU += dz^T h_prev
            gemm(h4, batch, self.input_size, 1.0, &dz.data, true, &x.data, false, 1.0, gw);
            gemm(h4, batch, h, 1.0, &dz.data, true, &h_prev.data, false, 1.0, gu);
            for r in 0..batch {
                for (acc, v) in gb.iter_mut().zip(&dz.data[r * h4..(r + 1) * h4]) {
                    *acc += v;
                }
            }
            gemm(batch, h4, self.input_size, 1.0, &dz.data, false, w, false, 0.0, &mut d_inputs[t].data);
            gemm(batch, h4, h, 1.0, &dz.data, false, u, false, 0.0, &mut dh_next.data);
        }
        Ok(LstmGrads {
            params: grads,
            inputs: d_inputs,
        })
    }
}

impl ParamBlock for LstmLayer {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_weights_and_inputs_give_zero_output() {
        let layer = LstmLayer::from_params(
            3,
            4,
            true,
            LstmActivation::Relu,
            vec![0.0; LstmLayer::param_count(3, 4)],
        )
        .unwrap();
        let xs = vec![Tensor2::zeros(2, 3); 5];
        let (out, _) = layer.forward(&xs).unwrap();
        for step in out.into_sequence() {
            assert!(step.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step_by_hand() {
        // input 1, hidden 2, all weights and biases 1, x = 0.5, h0 = c0 = 0
        let layer = LstmLayer::from_params(
            1,
            2,
            false,
            LstmActivation::Tanh,
            vec![1.0; LstmLayer::param_count(1, 2)],
        )
        .unwrap();
        let x = Tensor2::from_vec(1, 1, vec![0.5]).unwrap();
        let (out, _) = layer.forward(&[x]).unwrap();
        let pre: f64 = 0.5 + 1.0;
        let s = 1.0 / (1.0 + (-pre).exp());
        let c = s * pre.tanh();
        let expected = s * c.tanh();
        let out = out.into_last();
        assert_eq!(out.shape(), (1, 2));
        for v in out.data {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_batch_rows_give_identical_outputs() {
        let mut r = rng::seeded(3);
        let layer = LstmLayer::new(2, 3, false, LstmActivation::Relu, &mut r);
        let xs: Vec<Tensor2> = (0..4)
            .map(|t| {
                let v = [t as f64 * 0.3, -0.2 * t as f64];
                Tensor2::from_vec(2, 2, vec![v[0], v[1], v[0], v[1]]).unwrap()
            })
            .collect();
        let out = layer.forward(&xs).unwrap().0.into_last();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut r = rng::seeded(0);
        let layer = LstmLayer::new(3, 5, true, LstmActivation::Relu, &mut r);
        let b = &layer.params()[4 * 5 * (3 + 5)..];
        assert!(b[5..10].iter().all(|&v| v == 1.0));
        assert!(b[..5].iter().chain(&b[10..]).all(|&v| v == 0.0));
        assert_eq!(layer.params().len(), 4 * 5 * (3 + 5 + 1));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut r = rng::seeded(1);
        let mut layer = LstmLayer::new(2, 2, false, LstmActivation::Relu, &mut r);
        let xs = vec![Tensor2::zeros(1, 2); 2];
        let (_, cache) = layer.forward(&xs).unwrap();
        layer.params_mut()[0] += 0.1;
        let up = vec![Tensor2::zeros(1, 2)];
        assert!(matches!(layer.backward(&cache, &up), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::seeded(2);
        let layer = LstmLayer::new(2, 3, true, LstmActivation::Tanh, &mut r);
        let xs: Vec<Tensor2> = (0..3)
            .map(|t| Tensor2::from_vec(2, 2, vec![0.1 * t as f64, 0.3, -0.4, 0.2]).unwrap())
            .collect();
        let (_, cache) = layer.forward(&xs).unwrap();
        let g = layer.backward(&cache, &vec![Tensor2::zeros(2, 3); 3]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.inputs.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut r = rng::seeded(2);
        let layer = LstmLayer::new(2, 3, true, LstmActivation::Tanh, &mut r);
        assert!(matches!(
            layer.forward(&[Tensor2::zeros(1, 3)]),
            Err(Error::Shape(_))
        ));
    }
}
