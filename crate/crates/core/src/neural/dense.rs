use rand::Rng as _;

use super::tensor::{gemm, Tensor2};
use super::{next_layer_id, ParamBlock};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fully connected layer, `y = act(x W^T + b)` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub input_size: usize,
    pub output_size: usize,
    pub relu: bool,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    layer_id: u64,
    version: u64,
    input: Tensor2,
    output: Tensor2,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub params: Vec<f64>,
    pub input: Tensor2,
}

impl DenseLayer {
    pub fn param_count(input_size: usize, output_size: usize) -> usize {
        output_size * (input_size + 1)
    }

    pub fn new(input_size: usize, output_size: usize, relu: bool, rng: &mut Rng) -> Self {
        let lim = (6.0 / (input_size + output_size) as f64).sqrt();
        let mut params: Vec<f64> = (0..input_size * output_size)
            .map(|_| rng.random_range(-lim..lim))
            .collect();
        params.extend(std::iter::repeat_n(0.0, output_size));
        Self::from_params(input_size, output_size, relu, params).expect("sized by construction")
    }

    pub fn from_params(
        input_size: usize,
        output_size: usize,
        relu: bool,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_count(input_size, output_size);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "dense {input_size}->{output_size} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            input_size,
            output_size,
            relu,
            params,
            id: next_layer_id(),
            version: 0,
        })
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, DenseCache)> {
        if x.cols != self.input_size {
            return Err(Error::Shape(format!(
                "dense input has {} columns, expected {}",
                x.cols, self.input_size
            )));
        }
        let (w, b) = self.params.split_at(self.input_size * self.output_size);
        let mut y = Tensor2::zeros(x.rows, self.output_size);
        for r in 0..x.rows {
            y.data[r * self.output_size..(r + 1) * self.output_size].copy_from_slice(b);
        }
        gemm(x.rows, self.input_size, self.output_size, 1.0, &x.data, false, w, true, 1.0, &mut y.data);
        if self.relu {
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let cache = DenseCache {
            layer_id: self.id,
            version: self.version,
            input: x.clone(),
            output: y.clone(),
        };
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &DenseCache, upstream: &Tensor2) -> Result<DenseGrads> {
        if cache.layer_id != self.id || cache.version != self.version {
            return Err(Error::State(
                "dense cache was produced by different parameters".into(),
            ));
        }
        if upstream.shape() != cache.output.shape() {
            return Err(Error::Shape("dense upstream gradient shape mismatch".into()));
        }
        let mut dz = upstream.clone();
        if self.relu {
            for (g, &y) in dz.data.iter_mut().zip(&cache.output.data) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let n_w = self.input_size * self.output_size;
        let mut params = vec![0.0; self.params.len()];
        let batch = cache.input.rows;
        let (gw, gb) = params.split_at_mut(n_w);
        gemm(self.output_size, batch, self.input_size, 1.0, &dz.data, true, &cache.input.data, false, 0.0, gw);
        for r in 0..batch {
            for (acc, v) in gb.iter_mut().zip(dz.row(r)) {
                *acc += v;
            }
        }
        let mut input = Tensor2::zeros(batch, self.input_size);
        let w = &self.params[..n_w];
        gemm(batch, self.output_size, self.input_size, 1.0, &dz.data, false, w, false, 0.0, &mut input.data);
        Ok(DenseGrads { params, input })
    }
}

impl ParamBlock for DenseLayer {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }
}
