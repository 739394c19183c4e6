//! Balancing weights for lagged windows.
//!
//! Stabilized weights compare, at every step of a window, the density of the
//! observed treatment given its own history against its density given history
//! and covariates:
//!
//! ```text
//! SW(window) = prod_t f(X_t | X_{t-1..t-h}) / prod_t f(X_t | X_{t-1..t-h}, Z_{t..t-h})
//! ```
//!
//! Each conditional density comes from a single Gaussian mixture fitted to the
//! joint feature vector; conditioning divides by the mixture's own marginal
//! over the conditioning coordinates. Products become sums of log-densities.

use serde::{Deserialize, Serialize};

use super::gmm::{fit_gmm, GmmModel};
use super::logistic::LogisticRegression;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::timeseries::{LaggedDataset, TimeSeriesFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    None,
    Iptw,
    Stabilized,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    /// Mean log-likelihood per EM iteration, one trace per numerator fit.
    pub numerator_ll: Vec<Vec<f64>>,
    pub denominator_ll: Vec<Vec<f64>>,
    pub effective_sample_size: f64,
}

/// Per-window weights keyed by the window's last input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub window_ends: Vec<usize>,
    /// Clipped and mean-normalized.
    pub weights: Vec<f64>,
    /// Raw ratios before clipping and normalization.
    pub unclipped: Vec<f64>,
    pub kind: WeightKind,
    /// Lower and upper clipping percentiles.
    pub clip_bounds: (f64, f64),
    pub diagnostics: WeightDiagnostics,
}

impl WeightVector {
    pub fn uniform(window_ends: Vec<usize>) -> Self {
        let n = window_ends.len();
        Self {
            window_ends,
            weights: vec![1.0; n],
            unclipped: vec![1.0; n],
            kind: WeightKind::None,
            clip_bounds: (0.0, 100.0),
            diagnostics: WeightDiagnostics {
                effective_sample_size: n as f64,
                ..Default::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len().max(1) as f64
    }

    /// Weights for the windows of `ds`, matched on end index and rescaled to
    /// mean one over that subset.
    pub fn for_dataset(&self, ds: &LaggedDataset) -> Result<Vec<f64>> {
        let first = *self
            .window_ends
            .first()
            .ok_or_else(|| Error::Shape("empty weight vector".into()))?;
        let mut picked = Vec::with_capacity(ds.len());
        for w in &ds.windows {
            let pos = w
                .end_index
                .checked_sub(first)
                .filter(|&p| p < self.window_ends.len() && self.window_ends[p] == w.end_index)
                .or_else(|| self.window_ends.iter().position(|&e| e == w.end_index))
                .ok_or_else(|| Error::Weight {
                    timestep: w.end_index,
                    message: "no weight for this window end".into(),
                })?;
            picked.push(self.weights[pos]);
        }
        let mean = picked.iter().sum::<f64>() / picked.len().max(1) as f64;
        Ok(picked.into_iter().map(|w| w / mean).collect())
    }
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Percentile of sorted data with linear interpolation between ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Clips to the given percentiles, then rescales to mean one.
pub fn clip_and_normalize(raw: &[f64], bounds: (f64, f64)) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, bounds.0);
    let hi = percentile(&sorted, bounds.1);
    let clipped: Vec<f64> = raw.iter().map(|w| w.clamp(lo, hi)).collect();
    let mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
    clipped.into_iter().map(|w| w / mean).collect()
}

fn standardized(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    values.iter().map(|v| (v - mean) / std).collect()
}

fn validate_inputs(treatment: &[f64], covariates: &[&[f64]], lag: usize, history: usize) -> Result<()> {
    let n = treatment.len();
    if lag == 0 {
        return Err(Error::Config("lag must be at least 1".into()));
    }
    if let Some(c) = covariates.iter().find(|c| c.len() != n) {
        return Err(Error::Shape(format!(
            "covariate has {} rows, treatment has {n}",
            c.len()
        )));
    }
    if n < lag || n <= history {
        return Err(Error::Window(format!(
            "{n} rows are too few for lag {lag} and history {history}"
        )));
    }
    if let Some(t) = treatment.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            row: t,
            column: "treatment".into(),
            message: "non-finite value".into(),
        });
    }
    Ok(())
}

/// Rows `t = history..n` of the per-step log weight `r_t`, summed over each
/// window ending at `e` for `e = lag-1..n`.
fn window_sums(step_log: &[f64], lag: usize) -> (Vec<usize>, Vec<f64>) {
    let n = step_log.len();
    let ends: Vec<usize> = (lag - 1..n).collect();
    let sums = ends
        .iter()
        .map(|&e| step_log[e + 1 - lag..=e].iter().sum())
        .collect();
    (ends, sums)
}

fn finish(
    ends: Vec<usize>,
    log_weights: Vec<f64>,
    kind: WeightKind,
    clip_bounds: (f64, f64),
    mut diagnostics: WeightDiagnostics,
) -> Result<WeightVector> {
    let mut unclipped = Vec::with_capacity(log_weights.len());
    for (&e, lw) in ends.iter().zip(&log_weights) {
        let w = lw.exp();
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::Weight {
                timestep: e,
                message: format!("log weight {lw} does not give a positive finite ratio"),
            });
        }
        unclipped.push(w);
    }
    let weights = clip_and_normalize(&unclipped, clip_bounds);
    diagnostics.effective_sample_size = effective_sample_size(&weights);
    Ok(WeightVector {
        window_ends: ends,
        weights,
        unclipped,
        kind,
        clip_bounds,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizedOptions {
    pub n_components: usize,
    /// Treatment-history length; defaults to the window lag.
    pub history_lag: Option<usize>,
    pub clip_percentiles: (f64, f64),
    /// Fit separate mixtures for every position inside the window instead of
    /// one pair of mixtures shared by all positions.
    pub per_offset_fit: bool,
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for StabilizedOptions {
    fn default() -> Self {
        Self {
            n_components: 3,
            history_lag: None,
            clip_percentiles: (1.0, 99.0),
            per_offset_fit: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Joint feature vectors and the conditioning mixture for one feature set.
struct ConditionalDensity {
    joint: GmmModel,
    condition: Option<GmmModel>,
    ll_trace: Vec<f64>,
}

impl ConditionalDensity {
    fn fit(rows: &[Vec<f64>], n_components: usize, seed: u64) -> Result<Self> {
        let fit = fit_gmm(rows, n_components, seed)?;
        let dim = fit.model.dim();
        let condition = if dim > 1 {
            Some(fit.model.marginal(&(1..dim).collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(Self {
            joint: fit.model,
            condition,
            ll_trace: fit.log_likelihood_trace,
        })
    }

    /// `ln f(x_t | rest)` where coordinate 0 of `row` is `x_t`.
    fn log_density(&self, row: &[f64]) -> Result<f64> {
        let joint = self.joint.log_pdf(row)?;
        Ok(match &self.condition {
            Some(c) => joint - c.log_pdf(&row[1..])?,
            None => joint,
        })
    }
}

struct FeatureBuilder {
    x: Vec<f64>,
    z: Vec<Vec<f64>>,
    history: usize,
}

impl FeatureBuilder {
    /// `[x_t, x_{t-1}, ..., x_{t-h}]`, then `z_t, ..., z_{t-h}` when requested.
    fn row(&self, t: usize, with_covariates: bool) -> Vec<f64> {
        let h = self.history;
        let mut row: Vec<f64> = (0..=h).map(|s| self.x[t - s]).collect();
        if with_covariates {
            for s in 0..=h {
                row.extend(self.z.iter().map(|col| col[t - s]));
            }
        }
        row
    }
}

/// Stabilized weights for every window end `lag-1..N` of the given series.
/// Steps with fewer than `history_lag` predecessors contribute a ratio of 1.
pub fn stabilized_weights(
    treatment: &[f64],
    covariates: &[&[f64]],
    lag: usize,
    opts: &StabilizedOptions,
) -> Result<WeightVector> {
    let history = opts.history_lag.unwrap_or(lag);
    validate_inputs(treatment, covariates, lag, history)?;
    let n = treatment.len();
    let features = FeatureBuilder {
        x: standardized(treatment),
        z: covariates.iter().map(|c| standardized(c)).collect(),
        history,
    };

    let mut diagnostics = WeightDiagnostics::default();
    let mut step_log = vec![0.0; n];
    if opts.per_offset_fit {
        // offset i of the window ending at e sits at row e - (lag - 1 - i)
        let mut per_offset = vec![vec![0.0; n]; lag];
        for (i, logs) in per_offset.iter_mut().enumerate() {
            let rows: Vec<usize> = (history.max(i)..n + i + 1 - lag).collect();
            let seed = opts.seed.wrapping_add(i as u64);
            let (r, num_ll, den_ll) = step_log_ratios(&features, &rows, opts, seed)?;
            for (&t, v) in rows.iter().zip(r) {
                logs[t] = v;
            }
            diagnostics.numerator_ll.push(num_ll);
            diagnostics.denominator_ll.push(den_ll);
        }
        let ends: Vec<usize> = (lag - 1..n).collect();
        let sums = ends
            .iter()
            .map(|&e| (0..lag).map(|i| per_offset[i][e + 1 + i - lag]).sum())
            .collect();
        return finish(ends, sums, WeightKind::Stabilized, opts.clip_percentiles, diagnostics);
    }

    let rows: Vec<usize> = (history..n).collect();
    let (r, num_ll, den_ll) = step_log_ratios(&features, &rows, opts, opts.seed)?;
    for (&t, v) in rows.iter().zip(r) {
        step_log[t] = v;
    }
    diagnostics.numerator_ll.push(num_ll);
    diagnostics.denominator_ll.push(den_ll);
    let (ends, sums) = window_sums(&step_log, lag);
    finish(ends, sums, WeightKind::Stabilized, opts.clip_percentiles, diagnostics)
}

type StepRatios = (Vec<f64>, Vec<f64>, Vec<f64>);

fn step_log_ratios(
    features: &FeatureBuilder,
    rows: &[usize],
    opts: &StabilizedOptions,
    seed: u64,
) -> Result<StepRatios> {
    let num_rows: Vec<Vec<f64>> = rows.iter().map(|&t| features.row(t, false)).collect();
    let numerator = ConditionalDensity::fit(&num_rows, opts.n_components, seed)?;
    let denominator = if features.z.is_empty() {
        None
    } else {
        let den_rows: Vec<Vec<f64>> = rows.iter().map(|&t| features.row(t, true)).collect();
        Some(ConditionalDensity::fit(&den_rows, opts.n_components, seed)?)
    };
    let den = denominator.as_ref().unwrap_or(&numerator);
    let with_cov = denominator.is_some();
    let ratios = opts.exec.try_map(rows.len(), |k| {
        let t = rows[k];
        let lr = numerator.log_density(&num_rows[k])?
            - den.log_density(&features.row(t, with_cov))?;
        if lr.is_finite() {
            Ok(lr)
        } else {
            Err(Error::Weight {
                timestep: t,
                message: "non-finite log density ratio".into(),
            })
        }
    })?;
    Ok((ratios, numerator.ll_trace.clone(), den.ll_trace.clone()))
}

pub fn stabilized_weights_for_frame(
    frame: &TimeSeriesFrame,
    lag: usize,
    opts: &StabilizedOptions,
) -> Result<WeightVector> {
    let covs: Vec<&[f64]> = frame.covariates().map(|c| c.values.as_slice()).collect();
    stabilized_weights(&frame.treatment().values, &covs, lag, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    #[default]
    Median,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IptwOptions {
    pub threshold: Threshold,
    /// Covariate-history length fed to the propensity model; defaults to the lag.
    pub history_lag: Option<usize>,
    pub clip_percentiles: (f64, f64),
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for IptwOptions {
    fn default() -> Self {
        Self {
            threshold: Threshold::Median,
            history_lag: None,
            clip_percentiles: (1.0, 99.0),
            l2: 1e-4,
            max_iter: 2000,
        }
    }
}

pub const PROPENSITY_FLOOR: f64 = 0.01;
pub const PROPENSITY_CEIL: f64 = 0.99;

/// Inverse-probability weight of one step after clipping the propensity.
pub fn iptw_step_weight(propensity: f64, treated: bool) -> f64 {
    let e = propensity.clamp(PROPENSITY_FLOOR, PROPENSITY_CEIL);
    if treated {
        1.0 / e
    } else {
        1.0 / (1.0 - e)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    percentile(&s, 50.0)
}

/// Binarizes treatment at the threshold (`x > threshold` is treated), fits a
/// logistic propensity on the covariate history and multiplies per-step
/// inverse-probability weights across each window.
pub fn iptw_weights(
    treatment: &[f64],
    covariates: &[&[f64]],
    lag: usize,
    opts: &IptwOptions,
) -> Result<WeightVector> {
    let history = opts.history_lag.unwrap_or(lag);
    validate_inputs(treatment, covariates, lag, history)?;
    let n = treatment.len();
    let threshold = match opts.threshold {
        Threshold::Median => median(treatment),
        Threshold::Value(v) => v,
    };
    let treated: Vec<bool> = treatment.iter().map(|&x| x > threshold).collect();
    let n_treated = treated.iter().filter(|&&b| b).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::DegenerateTreatment(format!(
            "all {n} steps fall on one side of threshold {threshold}"
        )));
    }

    let z: Vec<Vec<f64>> = covariates.iter().map(|c| standardized(c)).collect();
    let rows: Vec<usize> = (history..n).collect();
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|&t| {
            (0..=history)
                .flat_map(|s| z.iter().map(move |col| col[t - s]))
                .collect()
        })
        .collect();
    let labels: Vec<bool> = rows.iter().map(|&t| treated[t]).collect();
    let model = LogisticRegression::fit(&design, &labels, opts.l2, opts.max_iter, 1e-8)?;

    let mut step_log = vec![0.0; n];
    for (k, &t) in rows.iter().enumerate() {
        step_log[t] = iptw_step_weight(model.predict_proba(&design[k]), treated[t]).ln();
    }
    let (ends, sums) = window_sums(&step_log, lag);
    finish(
        ends,
        sums,
        WeightKind::Iptw,
        opts.clip_percentiles,
        WeightDiagnostics::default(),
    )
}

pub fn iptw_weights_for_frame(
    frame: &TimeSeriesFrame,
    lag: usize,
    opts: &IptwOptions,
) -> Result<WeightVector> {
    let covs: Vec<&[f64]> = frame.covariates().map(|c| c.values.as_slice()).collect();
    iptw_weights(&frame.treatment().values, &covs, lag, opts)
}
