//! Accuracy and effect-recovery metrics, and per-variant evaluation on the
//! synthetic benchmark.

use serde::{Deserialize, Serialize};

use crate::density::WeightVector;
use crate::error::{Error, Result};
use crate::inference::{estimate_contrast, EffectReport, InterventionSpec, MonteCarloOptions};
use crate::parallel::Exec;
use crate::pom::{balancing_weights, Balancing, PomConfig, PomNetwork};
use crate::rng;
use crate::synthgen::SynthOutput;
use crate::timeseries::{chronological_split, make_lagged, make_test_windows, LaggedDataset, TimeSeriesFrame};

fn check_pair(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Metric(format!(
            "{what} needs equal non-empty sequences, got lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn root_mean_square_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, "rmse")?;
    Ok(root_mean_square_diff(y, y_hat))
}

/// Root mean squared error of per-step effect estimates.
pub fn pehe(true_ite: &[f64], est_ite: &[f64]) -> Result<f64> {
    if true_ite.is_empty() {
        return Err(Error::Metric("pehe needs ground-truth effects".into()));
    }
    check_pair(true_ite, est_ite, "pehe")?;
    Ok(root_mean_square_diff(true_ite, est_ite))
}

/// Which synthetic effect is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    /// Treatment multiplied by `scale`, compared with the factual series.
    Continuous { scale: f64 },
    /// Treatment clamped to 1 compared with treatment clamped to 0.
    Fixed,
}

impl Setting {
    pub fn label(&self) -> &'static str {
        match self {
            Setting::Continuous { .. } => "continuous",
            Setting::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub setting: String,
    pub seed: u64,
    /// Factual test-set error in outcome units.
    pub rmse: f64,
    pub late_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Average effect over the whole generated series.
    pub true_ate: Option<f64>,
    /// Average true effect over the evaluated test targets.
    pub true_ate_test: Option<f64>,
    pub pehe: Option<f64>,
    /// Fixed setting only: treated arm against the factual series.
    pub pehe_single_arm: Option<f64>,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pom: PomConfig,
    pub mc: MonteCarloOptions,
    pub train_fraction: f64,
    /// Borrow the tail of the training rows as context for the first test
    /// windows, so every test row is a target.
    pub context_bridge: bool,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pom: PomConfig::default(),
            mc: MonteCarloOptions::default(),
            train_fraction: 0.8,
            context_bridge: true,
            exec: Exec::default(),
        }
    }
}

/// A network trained on the head of a series together with its test windows.
#[derive(Debug, Clone)]
pub struct TrainedVariant {
    pub balancing: Balancing,
    pub network: PomNetwork,
    pub weights: WeightVector,
    pub train_len: usize,
    pub test: LaggedDataset,
    /// Deterministic factual predictions for `test`.
    pub factual_pred: Vec<f64>,
    pub rmse: f64,
}

impl TrainedVariant {
    /// Row of each test target in the full series.
    pub fn target_rows(&self) -> Vec<usize> {
        let offset = self.train_len - self.test.context_rows;
        self.test
            .target_indices()
            .into_iter()
            .map(|i| i + offset)
            .collect()
    }
}

pub fn train_variant(
    balancing: Balancing,
    frame: &TimeSeriesFrame,
    config: &EvalConfig,
) -> Result<TrainedVariant> {
    let pom = PomConfig {
        balancing,
        ..config.pom.clone()
    };
    let (train, test) = chronological_split(frame, config.train_fraction)?;
    let weights = balancing_weights(&train, &pom, config.exec)?;
    let ds = make_lagged(&train, pom.lag, pom.horizon)?;
    let mut network = PomNetwork::build(&pom, ds.n_features)?;
    network.fit(&ds, &weights)?;
    let test_ds = make_test_windows(&train, &test, pom.lag, pom.horizon, config.context_bridge)?;
    let factual_pred = network.predict(&test_ds.windows, false, &mut rng::seeded(0))?;
    let rmse = rmse(&test_ds.targets(), &factual_pred)?;
    Ok(TrainedVariant {
        balancing,
        network,
        weights,
        train_len: train.len(),
        test: test_ds,
        factual_pred,
        rmse,
    })
}

/// Effect estimates of `trained` scored against `truth`, whose factual series
/// must be the one the variant was trained on.
pub fn evaluate_trained(
    trained: &TrainedVariant,
    truth: &SynthOutput,
    setting: Setting,
    config: &EvalConfig,
) -> Result<(EvalSummary, EffectReport)> {
    let (base, treated) = match setting {
        Setting::Continuous { scale } => (None, InterventionSpec::Scale { factor: scale }),
        Setting::Fixed => (
            Some(InterventionSpec::Clamp { value: 0.0 }),
            InterventionSpec::Clamp { value: 1.0 },
        ),
    };
    let report = estimate_contrast(
        &trained.network,
        &trained.test,
        base.as_ref(),
        &treated,
        &config.mc,
    )?;
    let rows = trained.target_rows();
    if rows.last().is_some_and(|&r| r >= truth.true_ite.len()) {
        return Err(Error::Shape(
            "ground truth is shorter than the evaluated series".into(),
        ));
    }
    let true_ite: Vec<f64> = rows.iter().map(|&r| truth.true_ite[r]).collect();
    let pehe_value = pehe(&true_ite, &report.effects)?;
    let pehe_single_arm = match setting {
        Setting::Fixed => {
            let single = estimate_contrast(&trained.network, &trained.test, None, &treated, &config.mc)?;
            let arm = truth.single_arm_ite();
            let t: Vec<f64> = rows.iter().map(|&r| arm[r]).collect();
            Some(pehe(&t, &single.effects)?)
        }
        Setting::Continuous { .. } => None,
    };
    let summary = EvalSummary {
        variant: trained.balancing.label().into(),
        setting: setting.label().into(),
        seed: config.pom.seed,
        rmse: trained.rmse,
        late_hat: report.late,
        ci_low: report.ci_low,
        ci_high: report.ci_high,
        true_ate: Some(truth.true_ate),
        true_ate_test: Some(true_ite.iter().sum::<f64>() / true_ite.len() as f64),
        pehe: Some(pehe_value),
        pehe_single_arm,
        n_test: rows.len(),
    };
    Ok((summary, report))
}

/// Trains `balancing` on the factual series of `truth` and scores it.
pub fn evaluate_variant(
    balancing: Balancing,
    truth: &SynthOutput,
    setting: Setting,
    config: &EvalConfig,
) -> Result<EvalSummary> {
    let trained = train_variant(balancing, &truth.factual, config)?;
    Ok(evaluate_trained(&trained, truth, setting, config)?.0)
}

/// Median of a non-empty slice; NaN for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{intervene_continuous, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535_533_905_932_738).abs() < 1e-12);
        assert_eq!(rmse(&[0.0], &[2.0]).unwrap(), 2.0);
        assert!(matches!(rmse(&[], &[]), Err(Error::Metric(_))));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Metric(_))));
    }

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[0.5, -1.0], &[0.5, -1.0]).unwrap(), 0.0);
        assert_eq!(pehe(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert!(matches!(pehe(&[], &[]), Err(Error::Metric(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest! {
        #[test]
        fn errors_are_sign_symmetric_and_scale_equivariant(
            pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40),
            c in -10.0f64..10.0,
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let yh: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = rmse(&y, &yh).unwrap();
            let flipped: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| 2.0 * a - b).collect();
            prop_assert!((rmse(&y, &flipped).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
            let scaled: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a + c * (b - a)).collect();
            prop_assert!((rmse(&y, &scaled).unwrap() - c.abs() * base).abs() <= 1e-9 * (1.0 + base));
            let p = pehe(&y, &yh).unwrap();
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p == 0.0, y == yh);
        }
    }

    fn tiny_config(seed: u64) -> EvalConfig {
        EvalConfig {
            pom: PomConfig {
                lag: 3,
                lstm_widths: vec![4, 4, 4],
                dense_widths: vec![4, 2, 1],
                max_epochs: 2,
                seed,
                ..PomConfig::default()
            },
            mc: MonteCarloOptions {
                n_mc: 3,
                ..MonteCarloOptions::default()
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn identity_setting_reports_zero_effect() {
        let truth = intervene_continuous(&SynthConfig::new(200, 3), 1.1).unwrap();
        let cfg = tiny_config(1);
        let tv = train_variant(Balancing::None, &truth.factual, &cfg).unwrap();
        let (s, rep) = evaluate_trained(&tv, &truth, Setting::Continuous { scale: 1.0 }, &cfg).unwrap();
        assert_eq!(s.late_hat, 0.0);
        let rows = tv.target_rows();
        let t: Vec<f64> = rows.iter().map(|&r| truth.true_ite[r]).collect();
        let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        assert!((s.pehe.unwrap() - rms).abs() < 1e-12);
        assert_eq!(rep.effects.len(), rows.len());
        // the bridged test windows target every test row
        assert_eq!(rows.first(), Some(&160));
        assert_eq!(rows.last(), Some(&199));
    }

    #[test]
    fn same_seed_same_summary() {
        let truth = intervene_continuous(&SynthConfig::new(200, 4), 1.1).unwrap();
        let cfg = tiny_config(2);
        let setting = Setting::Continuous { scale: 1.1 };
        let a = evaluate_variant(Balancing::GmmSw, &truth, setting, &cfg).unwrap();
        let b = evaluate_variant(Balancing::GmmSw, &truth, setting, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pehe.is_some() && a.true_ate.is_some() && a.rmse >= 0.0);
    }
}
