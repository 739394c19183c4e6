//! Potential-outcome network: three stacked LSTM layers with dropout feeding
//! three dense layers, trained on the per-window weighted squared error.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::density::{
    iptw_weights_for_frame, stabilized_weights_for_frame, IptwOptions, StabilizedOptions,
    WeightVector,
};
use crate::error::{Error, Result};
use crate::neural::{
    decode_params, encode_params, weighted_mse, AdamConfig, AdamState, DenseCache, DenseLayer,
    Dropout, DropoutMask, LstmActivation, LstmCache, LstmLayer, ParamBlock, Tensor2,
};
use crate::parallel::Exec;
use crate::rng::{self, Rng};
use crate::timeseries::{LaggedDataset, Standardizer, TimeSeriesFrame, Window};

pub const CHECKPOINT_FORMAT: &str = "tcinet-checkpoint/v1";

const PREDICT_CHUNK: usize = 256;

/// How training windows are reweighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    #[default]
    None,
    Iptw,
    GmmSw,
}

impl Balancing {
    pub fn label(self) -> &'static str {
        match self {
            Balancing::None => "none",
            Balancing::Iptw => "iptw",
            Balancing::GmmSw => "gmm_sw",
        }
    }
}

impl std::str::FromStr for Balancing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Balancing::None),
            "iptw" => Ok(Balancing::Iptw),
            "gmm_sw" => Ok(Balancing::GmmSw),
            other => Err(Error::Config(format!(
                "unknown balancing `{other}` (expected none, iptw or gmm_sw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PomConfig {
    pub lag: usize,
    pub horizon: usize,
    /// Hidden sizes of the three LSTM layers.
    pub lstm_widths: Vec<usize>,
    /// Output sizes of the three dense layers; the last must be 1.
    pub dense_widths: Vec<usize>,
    pub activation: LstmActivation,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub balancing: Balancing,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub standardize: bool,
    /// Mixture components for stabilized weights.
    pub gmm_components: usize,
    pub seed: u64,
}

impl Default for PomConfig {
    fn default() -> Self {
        Self {
            lag: 10,
            horizon: 1,
            lstm_widths: vec![64, 64, 32],
            dense_widths: vec![32, 16, 1],
            activation: LstmActivation::Relu,
            dropout: 0.2,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 300,
            patience: 10,
            validation_fraction: 0.2,
            balancing: Balancing::None,
            clip_norm: Some(5.0),
            standardize: true,
            gmm_components: 3,
            seed: 0,
        }
    }
}

impl PomConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lag", self.lag),
            ("horizon", self.horizon),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("gmm_components", self.gmm_components),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Dropout::new(self.dropout)?;
        if self.lstm_widths.len() != 3 || self.lstm_widths.contains(&0) {
            return Err(Error::Shape(format!(
                "expected three positive LSTM widths, got {:?}",
                self.lstm_widths
            )));
        }
        if self.dense_widths.len() != 3
            || self.dense_widths.contains(&0)
            || self.dense_widths[2] != 1
        {
            return Err(Error::Shape(format!(
                "expected three positive dense widths ending in 1, got {:?}",
                self.dense_widths
            )));
        }
        Ok(())
    }

    /// Closed-form trainable-parameter count for `n_features` inputs.
    pub fn parameter_count(&self, n_features: usize) -> usize {
        let mut total = 0;
        let mut input = n_features;
        for &h in &self.lstm_widths {
            total += LstmLayer::param_count(input, h);
            input = h;
        }
        for &o in &self.dense_widths {
            total += DenseLayer::param_count(input, o);
            input = o;
        }
        total
    }
}

/// Balancing weights for every window end of `train` under `config`.
pub fn balancing_weights(
    train: &TimeSeriesFrame,
    config: &PomConfig,
    exec: Exec,
) -> Result<WeightVector> {
    let lag = config.lag;
    match config.balancing {
        Balancing::None => Ok(WeightVector::uniform(
            (lag - 1..train.len()).collect(),
        )),
        Balancing::Iptw => iptw_weights_for_frame(train, lag, &IptwOptions::default()),
        Balancing::GmmSw => stabilized_weights_for_frame(
            train,
            lag,
            &StabilizedOptions {
                n_components: config.gmm_components,
                seed: rng::derive_seed(config.seed, "weights/gmm", 0),
                exec,
                ..StabilizedOptions::default()
            },
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; 0 before training.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                crate::timeseries::format_real(r.train_loss),
                crate::timeseries::format_real(r.val_loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stack {
    lstm: [LstmLayer; 3],
    dense: [DenseLayer; 3],
    dropout: Dropout,
}

struct StackCache {
    lstm: Vec<LstmCache>,
    masks: [Vec<DropoutMask>; 2],
    dense: Vec<DenseCache>,
}

impl Stack {
    fn build(config: &PomConfig, n_features: usize, rng: &mut Rng) -> Result<Self> {
        let [h1, h2, h3] = [config.lstm_widths[0], config.lstm_widths[1], config.lstm_widths[2]];
        let [o1, o2, o3] = [config.dense_widths[0], config.dense_widths[1], config.dense_widths[2]];
        let act = config.activation;
        Ok(Self {
            lstm: [
                LstmLayer::new(n_features, h1, true, act, rng),
                LstmLayer::new(h1, h2, true, act, rng),
                LstmLayer::new(h2, h3, false, act, rng),
            ],
            dense: [
                DenseLayer::new(h3, o1, false, rng),
                DenseLayer::new(o1, o2, false, rng),
                DenseLayer::new(o2, o3, false, rng),
            ],
            dropout: Dropout::new(config.dropout)?,
        })
    }

    fn blocks(&self) -> [&dyn ParamBlock; 6] {
        [
            &self.lstm[0],
            &self.lstm[1],
            &self.lstm[2],
            &self.dense[0],
            &self.dense[1],
            &self.dense[2],
        ]
    }

    fn blocks_mut(&mut self) -> [&mut dyn ParamBlock; 6] {
        let [l0, l1, l2] = &mut self.lstm;
        let [d0, d1, d2] = &mut self.dense;
        [l0, l1, l2, d0, d1, d2]
    }

    fn flat_params(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.params().to_vec()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for b in self.blocks_mut() {
            let p = b.params_mut();
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        }
    }

    fn apply_dropout(
        &self,
        seq: Vec<Tensor2>,
        active: bool,
        rng: &mut Rng,
    ) -> (Vec<Tensor2>, Vec<DropoutMask>) {
        seq.iter()
            .map(|x| self.dropout.forward(x, active, rng))
            .unzip()
    }

    fn forward(
        &self,
        xs: &[Tensor2],
        dropout: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor2, StackCache)> {
        let (o1, c1) = self.lstm[0].forward(xs)?;
        let (s1, m1) = self.apply_dropout(o1.into_sequence(), dropout, rng);
        let (o2, c2) = self.lstm[1].forward(&s1)?;
        let (s2, m2) = self.apply_dropout(o2.into_sequence(), dropout, rng);
        let (o3, c3) = self.lstm[2].forward(&s2)?;
        let mut h = o3.into_last();
        let mut dense = Vec::with_capacity(3);
        for layer in &self.dense {
            let (y, c) = layer.forward(&h)?;
            dense.push(c);
            h = y;
        }
        Ok((
            h,
            StackCache {
                lstm: vec![c1, c2, c3],
                masks: [m1, m2],
                dense,
            },
        ))
    }

    /// Parameter gradients in flat layout for `upstream = dL/dy`.
    fn backward(&self, cache: &StackCache, upstream: Tensor2) -> Result<Vec<f64>> {
        let mut dense_grads = Vec::with_capacity(3);
        let mut g = upstream;
        for (layer, c) in self.dense.iter().zip(&cache.dense).rev() {
            let gr = layer.backward(c, &g)?;
            g = gr.input;
            dense_grads.push(gr.params);
        }
        dense_grads.reverse();
        let g3 = self.lstm[2].backward(&cache.lstm[2], &[g])?;
        let up2: Vec<Tensor2> = g3
            .inputs
            .iter()
            .zip(&cache.masks[1])
            .map(|(g, m)| self.dropout.backward(m, g))
            .collect();
        let g2 = self.lstm[1].backward(&cache.lstm[1], &up2)?;
        let up1: Vec<Tensor2> = g2
            .inputs
            .iter()
            .zip(&cache.masks[0])
            .map(|(g, m)| self.dropout.backward(m, g))
            .collect();
        let g1 = self.lstm[0].backward(&cache.lstm[0], &up1)?;
        let mut flat = g1.params;
        flat.extend(g2.params);
        flat.extend(g3.params);
        for d in dense_grads {
            flat.extend(d);
        }
        Ok(flat)
    }
}

/// The assembled network with its scalers and training record.
#[derive(Debug, Clone)]
pub struct PomNetwork {
    pub config: PomConfig,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    stack: Stack,
    feature_scaler: Option<Standardizer>,
    target_scaler: Option<Standardizer>,
    pub history: TrainingHistory,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub layers: Vec<String>,
    pub parameters: usize,
}

/// Scaled inputs and targets laid out for batching.
struct Prepared {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    lag: usize,
    n_features: usize,
}

impl Prepared {
    fn batch(&self, idx: &[usize]) -> Vec<Tensor2> {
        let (lag, f) = (self.lag, self.n_features);
        (0..lag)
            .map(|t| {
                let mut x = Tensor2::zeros(idx.len(), f);
                for (b, &i) in idx.iter().enumerate() {
                    let src = i * lag * f + t * f;
                    x.data[b * f..(b + 1) * f].copy_from_slice(&self.inputs[src..src + f]);
                }
                x
            })
            .collect()
    }
}

impl PomNetwork {
    /// Fresh network for `n_features` input channels, initialized from the
    /// config seed.
    pub fn build(config: &PomConfig, n_features: usize) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(Error::Shape("network needs at least one input feature".into()));
        }
        let mut init = rng::stream(config.seed, "pom/init", 0);
        Ok(Self {
            config: config.clone(),
            n_features,
            feature_names: Vec::new(),
            stack: Stack::build(config, n_features, &mut init)?,
            feature_scaler: None,
            target_scaler: None,
            history: TrainingHistory::default(),
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.stack.flat_params()
    }

    pub fn describe(&self) -> Description {
        let mut layers = Vec::new();
        for l in &self.stack.lstm {
            layers.push(format!(
                "lstm {}->{} ({}, {:?})",
                l.input_size,
                l.hidden_size,
                if l.return_sequences { "sequence" } else { "last" },
                l.activation
            ));
        }
        for d in &self.stack.dense {
            layers.push(format!("dense {}->{} (linear)", d.input_size, d.output_size));
        }
        Description {
            layers,
            parameters: self.stack.blocks().iter().map(|b| b.params().len()).sum(),
        }
    }

    /// Runs the stack on pre-scaled `batch x features` step tensors.
    pub fn forward_raw(&self, xs: &[Tensor2], dropout: bool, rng: &mut Rng) -> Result<Tensor2> {
        Ok(self.stack.forward(xs, dropout, rng)?.0)
    }

    fn prepare(&self, windows: &[Window], weights: Option<&[f64]>) -> Result<Prepared> {
        let (lag, f) = (self.config.lag, self.n_features);
        let mut inputs = Vec::with_capacity(windows.len() * lag * f);
        for (k, w) in windows.iter().enumerate() {
            if w.inputs.len() != lag * f {
                return Err(Error::Shape(format!(
                    "window {k} has {} inputs, expected lag {lag} x {f} features",
                    w.inputs.len()
                )));
            }
            match &self.feature_scaler {
                Some(s) => inputs.extend(
                    w.inputs
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| s.transform(i % f, v)),
                ),
                None => inputs.extend_from_slice(&w.inputs),
            }
        }
        let targets = windows
            .iter()
            .map(|w| match &self.target_scaler {
                Some(s) => s.transform(0, w.target),
                None => w.target,
            })
            .collect();
        Ok(Prepared {
            inputs,
            targets,
            weights: weights.map_or_else(|| vec![1.0; windows.len()], <[f64]>::to_vec),
            lag,
            n_features: f,
        })
    }

    fn fit_scalers(&mut self, train: &LaggedDataset) {
        if !self.config.standardize {
            self.feature_scaler = None;
            self.target_scaler = None;
            return;
        }
        let f = self.n_features;
        let mut cols = vec![Vec::with_capacity(train.len() * train.lag); f];
        for w in &train.windows {
            for (i, &v) in w.inputs.iter().enumerate() {
                cols[i % f].push(v);
            }
        }
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        self.feature_scaler = Some(Standardizer::fit(train.feature_names.clone(), &refs));
        let targets = train.targets();
        self.target_scaler = Some(Standardizer::fit(vec!["target".into()], &[&targets]));
    }

    /// Mini-batch Adam on the weighted squared error. The chronological tail
    /// of `train` is held out for early stopping, and the parameters of the
    /// best validation epoch are restored.
    pub fn fit(&mut self, train: &LaggedDataset, weights: &WeightVector) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data {
                row: 0,
                column: "windows".into(),
                message: "training set has no windows".into(),
            });
        }
        if train.lag != self.config.lag || train.n_features != self.n_features {
            return Err(Error::Shape(format!(
                "dataset is lag {} x {} features, network expects {} x {}",
                train.lag, train.n_features, self.config.lag, self.n_features
            )));
        }
        let w = weights.for_dataset(train)?;
        self.fit_with_weights(train, &w)
    }

    /// As [`PomNetwork::fit`] with one explicit weight per window.
    pub fn fit_with_weights(&mut self, train: &LaggedDataset, weights: &[f64]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data {
                row: 0,
                column: "windows".into(),
                message: "training set has no windows".into(),
            });
        }
        if weights.len() != train.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} windows",
                weights.len(),
                train.len()
            )));
        }
        self.feature_names = train.feature_names.clone();
        self.fit_scalers(train);
        let data = self.prepare(&train.windows, Some(weights))?;
        let n = train.len();
        let n_val = if n >= 2 {
            ((n as f64 * self.config.validation_fraction).floor() as usize).max(1)
        } else {
            0
        };
        let n_fit = n - n_val;
        let val_idx: Vec<usize> = (n_fit..n).collect();
        let mut order: Vec<usize> = (0..n_fit).collect();

        let mut shuffle = rng::stream(self.config.seed, "pom/shuffle", 0);
        let mut drop_rng = rng::stream(self.config.seed, "pom/dropout", 0);
        let mut params = self.stack.flat_params();
        let mut adam = AdamState::new(
            AdamConfig {
                learning_rate: self.config.learning_rate,
                ..AdamConfig::default()
            },
            params.len(),
        );
        let patience = self.config.patience.max(1);
        let mut history = TrainingHistory {
            best_val_loss: f64::INFINITY,
            ..Default::default()
        };
        let mut best = params.clone();
        let mut wait = 0;

        for epoch in 1..=self.config.max_epochs {
            order.shuffle(&mut shuffle);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let xs = data.batch(chunk);
                let target: Vec<f64> = chunk.iter().map(|&i| data.targets[i]).collect();
                let wts: Vec<f64> = chunk.iter().map(|&i| data.weights[i]).collect();
                let (pred, cache) = self.stack.forward(&xs, true, &mut drop_rng)?;
                let (loss, g) = weighted_mse(&pred.data, &target, &wts)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                total += loss * chunk.len() as f64;
                let mut grads = self
                    .stack
                    .backward(&cache, Tensor2::from_vec(chunk.len(), 1, g)?)?;
                if let Some(c) = self.config.clip_norm {
                    let norm = grads.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > c {
                        grads.iter_mut().for_each(|v| *v *= c / norm);
                    }
                }
                adam.step(&mut params, &grads);
                self.stack.set_flat_params(&params);
            }
            let train_loss = total / n_fit.max(1) as f64;
            let val_loss = if val_idx.is_empty() {
                train_loss
            } else {
                self.eval_loss(&data, &val_idx)?
            };
            if !val_loss.is_finite() || !train_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            history.epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
            });
            if val_loss < history.best_val_loss {
                history.best_val_loss = val_loss;
                history.best_epoch = epoch;
                best.copy_from_slice(&params);
                wait = 0;
            } else {
                wait += 1;
                if wait >= patience {
                    break;
                }
            }
        }
        self.stack.set_flat_params(&best);
        self.history = history;
        self.trained = true;
        Ok(())
    }

    fn eval_loss(&self, data: &Prepared, idx: &[usize]) -> Result<f64> {
        let mut rng = rng::seeded(0);
        let mut total = 0.0;
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let (pred, _) = self.stack.forward(&data.batch(chunk), false, &mut rng)?;
            let target: Vec<f64> = chunk.iter().map(|&i| data.targets[i]).collect();
            let wts: Vec<f64> = chunk.iter().map(|&i| data.weights[i]).collect();
            total += weighted_mse(&pred.data, &target, &wts)?.0 * chunk.len() as f64;
        }
        Ok(total / idx.len() as f64)
    }

    /// Predictions in natural outcome units. With `mc_dropout` each call is
    /// one stochastic forward sample drawn from `rng`; otherwise dropout is
    /// off and `rng` is untouched.
    pub fn predict(&self, windows: &[Window], mc_dropout: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::State("network has not been trained".into()));
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let data = self.prepare(windows, None)?;
        let idx: Vec<usize> = (0..windows.len()).collect();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in idx.chunks(PREDICT_CHUNK) {
            let (pred, _) = self.stack.forward(&data.batch(chunk), mc_dropout, rng)?;
            out.extend(pred.data.iter().map(|&z| match &self.target_scaler {
                Some(s) => s.inverse(0, z),
                None => z,
            }));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ck)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            feature_scaler: self.feature_scaler.clone(),
            target_scaler: self.target_scaler.clone(),
            layers: self
                .stack
                .blocks()
                .iter()
                .map(|b| encode_params(b.params()))
                .collect(),
            history: self.history.clone(),
            trained: self.trained,
        }
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}`",
                ck.format
            )));
        }
        let mut net = Self::build(&ck.config, ck.n_features)?;
        if ck.layers.len() != 6 {
            return Err(Error::Checkpoint(format!(
                "expected 6 layer blobs, found {}",
                ck.layers.len()
            )));
        }
        for (block, blob) in net.stack.blocks_mut().into_iter().zip(&ck.layers) {
            let values = decode_params(blob)?;
            let p = block.params_mut();
            if values.len() != p.len() {
                return Err(Error::Checkpoint(format!(
                    "layer blob holds {} values, layer needs {}",
                    values.len(),
                    p.len()
                )));
            }
            p.copy_from_slice(&values);
        }
        net.feature_names = ck.feature_names;
        net.feature_scaler = ck.feature_scaler;
        net.target_scaler = ck.target_scaler;
        net.history = ck.history;
        net.trained = ck.trained;
        Ok(net)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: PomConfig,
    n_features: usize,
    feature_names: Vec<String>,
    feature_scaler: Option<Standardizer>,
    target_scaler: Option<Standardizer>,
    /// Base64 little-endian f64 blobs, LSTM layers then dense layers.
    layers: Vec<String>,
    history: TrainingHistory,
    trained: bool,
}
