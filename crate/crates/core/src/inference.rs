//! Interventions on the treatment channel and Monte-Carlo effect estimates.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::pom::PomNetwork;
use crate::rng;
use crate::timeseries::{format_real, LaggedDataset};

const Z_95: f64 = 1.959_963_984_540_054;

/// A perturbation of the treatment channel, applied at every step of every
/// window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionSpec {
    Clamp { value: f64 },
    Scale { factor: f64 },
    /// Adds `multiple * trend` to every treatment value.
    AddTrendMultiple { trend: f64, multiple: f64 },
    /// Replaces the treatment with a constant; `None` uses the mean treatment
    /// value over the windows being perturbed.
    MeanReplace {
        #[serde(default)]
        value: Option<f64>,
    },
}

impl InterventionSpec {
    pub const IDENTITY: InterventionSpec = InterventionSpec::Scale { factor: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let finite = match *self {
            InterventionSpec::Clamp { value } => value.is_finite(),
            InterventionSpec::Scale { factor } => {
                if !(factor > 0.0) {
                    return Err(Error::Config(format!("scale factor must be positive, got {factor}")));
                }
                factor.is_finite()
            }
            InterventionSpec::AddTrendMultiple { trend, multiple } => {
                trend.is_finite() && multiple.is_finite()
            }
            InterventionSpec::MeanReplace { value } => value.is_none_or(f64::is_finite),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!("intervention {self} has a non-finite parameter")))
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl std::fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterventionSpec::Clamp { value } => write!(f, "clamp:{value}"),
            InterventionSpec::Scale { factor } => write!(f, "scale:{factor}"),
            InterventionSpec::AddTrendMultiple { trend, multiple } => {
                write!(f, "trend:{trend}x{multiple}")
            }
            InterventionSpec::MeanReplace { value: None } => write!(f, "mean_replace"),
            InterventionSpec::MeanReplace { value: Some(v) } => write!(f, "mean_replace:{v}"),
        }
    }
}

/// Parses `clamp:V`, `scale:F`, `trend:T[xM]` and `mean_replace[:V]`.
impl std::str::FromStr for InterventionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse intervention `{s}`"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a)),
            None => (s.trim(), None),
        };
        let spec = match (kind, arg) {
            ("clamp", Some(a)) => InterventionSpec::Clamp { value: num(a)? },
            ("scale", Some(a)) => InterventionSpec::Scale { factor: num(a)? },
            ("trend", Some(a)) => {
                let (t, m) = a.split_once('x').unwrap_or((a, "1"));
                InterventionSpec::AddTrendMultiple {
                    trend: num(t)?,
                    multiple: num(m)?,
                }
            }
            ("mean_replace", None) => InterventionSpec::MeanReplace { value: None },
            ("mean_replace", Some(a)) => InterventionSpec::MeanReplace {
                value: Some(num(a)?),
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Copy of `windows` with only the treatment channel rewritten.
pub fn apply_intervention(windows: &LaggedDataset, spec: &InterventionSpec) -> LaggedDataset {
    let f = windows.n_features;
    let ch = windows.treatment_channel();
    let mean = match spec {
        InterventionSpec::MeanReplace { value: None } => {
            let vals: Vec<f64> = windows
                .windows
                .iter()
                .flat_map(|w| w.inputs.iter().skip(ch).step_by(f).copied())
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        }
        _ => 0.0,
    };
    let map = |x: f64| match *spec {
        InterventionSpec::Clamp { value } => value,
        InterventionSpec::Scale { factor } => x * factor,
        InterventionSpec::AddTrendMultiple { trend, multiple } => x + multiple * trend,
        InterventionSpec::MeanReplace { value } => value.unwrap_or(mean),
    };
    let mut out = windows.clone();
    for w in &mut out.windows {
        for v in w.inputs.iter_mut().skip(ch).step_by(f) {
            *v = map(*v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CiMethod {
    /// `mean +- 1.96 sd / sqrt(n)` over per-run estimates.
    #[default]
    Normal,
    /// Percentile interval of resampled per-run means.
    Bootstrap { resamples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloOptions {
    pub n_mc: usize,
    pub mc_dropout: bool,
    /// Reuse one dropout stream for both arms of a run.
    pub paired: bool,
    pub ci: CiMethod,
    pub seed: u64,
    /// Keep every run's per-window predictions in the report.
    pub keep_runs: bool,
    pub exec: Exec,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            n_mc: 50,
            mc_dropout: true,
            paired: true,
            ci: CiMethod::Normal,
            seed: 0,
            keep_runs: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPredictions {
    pub base: Vec<f64>,
    pub treated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub intervention: String,
    /// Baseline arm: the factual input unless a reference intervention was given.
    pub baseline: String,
    pub factual_mean: Vec<f64>,
    pub counterfactual_mean: Vec<f64>,
    /// Per-window `counterfactual_mean - factual_mean`.
    pub effects: Vec<f64>,
    pub late: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_mc: usize,
    /// Per-run effect averages, one per Monte-Carlo run.
    pub run_lates: Vec<f64>,
    /// Set when the interval has no spread information (a single run or
    /// deterministic prediction).
    pub degenerate_ci: bool,
    pub paired: bool,
    /// Row of each window's target in the frame the windows were cut from.
    pub target_indices: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runs: Option<Vec<RunPredictions>>,
}

impl EffectReport {
    pub fn ci_half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `target_index, factual_mean, counterfactual_mean, effect` per window.
    pub fn write_predictions_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["target_index", "factual_mean", "counterfactual_mean", "effect"])?;
        for i in 0..self.effects.len() {
            w.write_record([
                self.target_indices[i].to_string(),
                format_real(self.factual_mean[i]),
                format_real(self.counterfactual_mean[i]),
                format_real(self.effects[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn column_means(runs: &[Vec<f64>], n: usize) -> Vec<f64> {
    let k = runs.len() as f64;
    (0..n).map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / k).collect()
}

fn interval(samples: &[f64], centre: f64, method: CiMethod, seed: u64) -> (f64, f64) {
    let n = samples.len();
    if n < 2 {
        return (centre, centre);
    }
    let (lo, hi) = match method {
        CiMethod::Normal => {
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let half = Z_95 * (var / n as f64).sqrt();
            (centre - half, centre + half)
        }
        CiMethod::Bootstrap { resamples } => {
            let mut r = rng::stream(seed, "mc/bootstrap", 0);
            let mut means: Vec<f64> = (0..resamples.max(1))
                .map(|_| (0..n).map(|_| samples[r.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect();
            means.sort_by(f64::total_cmp);
            (
                crate::density::weights::percentile(&means, 2.5),
                crate::density::weights::percentile(&means, 97.5),
            )
        }
    };
    (lo.min(centre), hi.max(centre))
}

/// Contrast of `treated` against `base` (the factual windows when `None`),
/// averaged over Monte-Carlo dropout runs.
pub fn estimate_contrast(
    network: &PomNetwork,
    windows: &LaggedDataset,
    base: Option<&InterventionSpec>,
    treated: &InterventionSpec,
    opts: &MonteCarloOptions,
) -> Result<EffectReport> {
    if !network.is_trained() {
        return Err(Error::State("effect estimation needs a trained network".into()));
    }
    if opts.n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    treated.validate()?;
    if let Some(b) = base {
        b.validate()?;
    }
    let base_windows = match base {
        Some(b) => apply_intervention(windows, b),
        None => windows.clone(),
    };
    let treated_windows = apply_intervention(windows, treated);
    let n = windows.len();

    // Without dropout every run is the same deterministic pass.
    let distinct = if opts.mc_dropout { opts.n_mc } else { 1 };
    let runs = opts.exec.try_map(distinct, |r| -> Result<RunPredictions> {
        let mut arm = rng::stream(opts.seed, "mc", r as u64);
        let mut other = if opts.paired {
            arm.clone()
        } else {
            rng::stream(opts.seed, "mc/treated", r as u64)
        };
        Ok(RunPredictions {
            base: network.predict(&base_windows.windows, opts.mc_dropout, &mut arm)?,
            treated: network.predict(&treated_windows.windows, opts.mc_dropout, &mut other)?,
        })
    })?;

    let base_runs: Vec<Vec<f64>> = runs.iter().map(|r| r.base.clone()).collect();
    let treated_runs: Vec<Vec<f64>> = runs.iter().map(|r| r.treated.clone()).collect();
    let factual_mean = column_means(&base_runs, n);
    let counterfactual_mean = column_means(&treated_runs, n);
    let effects: Vec<f64> = counterfactual_mean
        .iter()
        .zip(&factual_mean)
        .map(|(c, f)| c - f)
        .collect();
    let late = effects.iter().sum::<f64>() / n.max(1) as f64;
    let mut run_lates: Vec<f64> = runs
        .iter()
        .map(|r| {
            r.treated.iter().zip(&r.base).map(|(c, f)| c - f).sum::<f64>() / n.max(1) as f64
        })
        .collect();
    if distinct < opts.n_mc {
        run_lates = vec![run_lates[0]; opts.n_mc];
    }
    let (ci_low, ci_high) = interval(&run_lates, late, opts.ci, opts.seed);
    Ok(EffectReport {
        intervention: treated.label(),
        baseline: base.map_or_else(|| "factual".to_string(), InterventionSpec::label),
        factual_mean,
        counterfactual_mean,
        effects,
        late,
        ci_low,
        ci_high,
        n_mc: opts.n_mc,
        run_lates,
        degenerate_ci: opts.n_mc == 1 || !opts.mc_dropout,
        paired: opts.paired,
        target_indices: windows.target_indices(),
        runs: opts.keep_runs.then_some(runs),
    })
}

/// Average effect of `spec` relative to the factual treatment.
pub fn estimate_late(
    network: &PomNetwork,
    windows: &LaggedDataset,
    spec: &InterventionSpec,
    opts: &MonteCarloOptions,
) -> Result<EffectReport> {
    estimate_contrast(network, windows, None, spec, opts)
}

/// `|LATE|` under the identity intervention.
pub fn placebo_check(
    network: &PomNetwork,
    windows: &LaggedDataset,
    opts: &MonteCarloOptions,
) -> Result<f64> {
    Ok(estimate_late(network, windows, &InterventionSpec::IDENTITY, opts)?
        .late
        .abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pom::PomConfig;
    use crate::timeseries::{make_lagged, Column, Role, TimeSeriesFrame, Timestamp};

    fn frame(n: usize, treatment: impl Fn(usize) -> f64) -> TimeSeriesFrame {
        TimeSeriesFrame::new(
            (0..n as i64).map(Timestamp::Step).collect(),
            vec![
                Column::new("z", Role::Covariate, (0..n).map(|i| (i as f64).sin()).collect()),
                Column::new("x", Role::Treatment, (0..n).map(treatment).collect()),
                Column::new(
                    "y",
                    Role::Outcome,
                    (0..n).map(|i| (i as f64 * 0.3).cos()).collect(),
                ),
            ],
        )
        .unwrap()
    }

    fn trained(ds: &LaggedDataset) -> PomNetwork {
        let cfg = PomConfig {
            lag: ds.lag,
            lstm_widths: vec![4, 4, 4],
            dense_widths: vec![4, 2, 1],
            max_epochs: 2,
            ..PomConfig::default()
        };
        let mut net = PomNetwork::build(&cfg, ds.n_features).unwrap();
        net.fit_with_weights(ds, &vec![1.0; ds.len()]).unwrap();
        net
    }

    #[test]
    fn unit_scale_leaves_windows_bitwise() {
        let ds = make_lagged(&frame(30, |i| i as f64 * 0.7 - 3.0), 3, 1).unwrap();
        assert_eq!(apply_intervention(&ds, &InterventionSpec::IDENTITY), ds);
    }

    #[test]
    fn clamps_touch_only_the_treatment() {
        let ds = make_lagged(&frame(30, |i| i as f64), 3, 1).unwrap();
        let zero = apply_intervention(&ds, &InterventionSpec::Clamp { value: 0.0 });
        let one = apply_intervention(&ds, &InterventionSpec::Clamp { value: 1.0 });
        for ((a, b), orig) in zero.windows.iter().zip(&one.windows).zip(&ds.windows) {
            for t in 0..3 {
                assert_eq!(a.inputs[t * 2 + 1], 0.0);
                assert_eq!(b.inputs[t * 2 + 1], 1.0);
                assert_eq!(a.inputs[t * 2], orig.inputs[t * 2]);
                assert_eq!(b.inputs[t * 2], orig.inputs[t * 2]);
            }
            assert_eq!(a.target, orig.target);
        }
    }

    #[test]
    fn trend_multiple_shifts_constant_treatment() {
        let ds = make_lagged(&frame(20, |_| 5.0), 4, 1).unwrap();
        let out = apply_intervention(
            &ds,
            &InterventionSpec::AddTrendMultiple {
                trend: 0.039,
                multiple: 2.0,
            },
        );
        for w in &out.windows {
            for t in 0..4 {
                assert_eq!(w.inputs[t * 2 + 1], 5.0 + 2.0 * 0.039);
            }
        }
    }

    #[test]
    fn mean_replace_uses_window_mean() {
        let ds = make_lagged(&frame(10, |i| i as f64), 1, 1).unwrap();
        let out = apply_intervention(&ds, &InterventionSpec::MeanReplace { value: None });
        // windows see treatment rows 0..=8
        assert!(out.windows.iter().all(|w| w.inputs[1] == 4.0));
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["clamp:1", "scale:1.1", "trend:0.039x3", "mean_replace", "mean_replace:2.5"] {
            let spec: InterventionSpec = s.parse().unwrap();
            assert_eq!(spec.to_string().parse::<InterventionSpec>().unwrap(), spec);
        }
        assert!("scale:0".parse::<InterventionSpec>().is_err());
        assert!("scale:-1".parse::<InterventionSpec>().is_err());
        assert!("warp:3".parse::<InterventionSpec>().is_err());
    }

    #[test]
    fn untrained_network_is_state_error() {
        let ds = make_lagged(&frame(30, |i| i as f64), 3, 1).unwrap();
        let net = PomNetwork::build(
            &PomConfig {
                lag: 3,
                ..PomConfig::default()
            },
            2,
        )
        .unwrap();
        assert!(matches!(
            estimate_late(&net, &ds, &InterventionSpec::IDENTITY, &MonteCarloOptions::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn identity_is_exactly_null() {
        let ds = make_lagged(&frame(60, |i| (i as f64 * 0.2).sin()), 3, 1).unwrap();
        let net = trained(&ds);
        for mc in [false, true] {
            let opts = MonteCarloOptions {
                n_mc: 8,
                mc_dropout: mc,
                ..MonteCarloOptions::default()
            };
            let rep = estimate_late(&net, &ds, &InterventionSpec::IDENTITY, &opts).unwrap();
            assert_eq!(rep.late, 0.0);
            assert!(rep.effects.iter().all(|&e| e == 0.0));
            assert_eq!(placebo_check(&net, &ds, &opts).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_run_has_degenerate_interval() {
        let ds = make_lagged(&frame(60, |i| (i as f64 * 0.2).sin()), 3, 1).unwrap();
        let net = trained(&ds);
        let opts = MonteCarloOptions {
            n_mc: 1,
            ..MonteCarloOptions::default()
        };
        let rep = estimate_late(&net, &ds, &InterventionSpec::Scale { factor: 2.0 }, &opts).unwrap();
        assert!(rep.degenerate_ci);
        assert_eq!(rep.ci_low, rep.ci_high);
        assert_eq!(rep.ci_low, rep.late);
    }

    #[test]
    fn late_is_time_mean_of_effects_and_inside_ci() {
        let ds = make_lagged(&frame(60, |i| (i as f64 * 0.2).sin()), 3, 1).unwrap();
        let net = trained(&ds);
        for ci in [CiMethod::Normal, CiMethod::Bootstrap { resamples: 200 }] {
            let opts = MonteCarloOptions {
                n_mc: 10,
                ci,
                keep_runs: true,
                ..MonteCarloOptions::default()
            };
            let rep =
                estimate_late(&net, &ds, &InterventionSpec::Clamp { value: 1.0 }, &opts).unwrap();
            let mean = rep.effects.iter().sum::<f64>() / rep.effects.len() as f64;
            assert_eq!(rep.late, mean);
            assert!(rep.ci_low <= rep.late && rep.late <= rep.ci_high);
            assert_eq!(rep.runs.as_ref().unwrap().len(), 10);
        }
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        let ds = make_lagged(&frame(60, |i| (i as f64 * 0.2).sin()), 3, 1).unwrap();
        let net = trained(&ds);
        let spec = InterventionSpec::Scale { factor: 1.5 };
        let a = estimate_late(
            &net,
            &ds,
            &spec,
            &MonteCarloOptions {
                n_mc: 6,
                exec: Exec::Sequential,
                ..MonteCarloOptions::default()
            },
        )
        .unwrap();
        let b = estimate_late(
            &net,
            &ds,
            &spec,
            &MonteCarloOptions {
                n_mc: 6,
                exec: Exec::Parallel,
                ..MonteCarloOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
