//! Four-series nonlinear synthetic system with ground-truth counterfactuals.
//!
//! ```text
//! S1_t = cos(t/10) + ln(|S1_{t-6} - S1_{t-10}| + 1) + 0.1 e1
//! S2_t = 1.2 exp(S1_{t-1}^2 / 2) + e2
//! S3_t = -1.05 exp(-S1_{t-1}^2 / 2) + e3
//! S4_t = -1.15 exp(-S1_{t-1}^2 / 2) + 1.35 exp(-S3_{t-1}^2 / 2)
//!        + 0.28 exp(-S4_{t-1}^2 / 2) + e4
//! ```
//!
//! S3 is the treatment, S4 the outcome, S1 and S2 covariates (S1 confounds
//! S3 and S4; S2 is not a parent of S4). Every arm of an intervention reuses
//! the same noise draws, so the only difference between arms is the S3 path.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::timeseries::{format_real, write_csv, Column, Role, TimeSeriesFrame, Timestamp};

/// Rows before the first equation step; S1 looks back ten steps.
const INIT_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionKind {
    /// Counterfactual arm equals the factual arm.
    #[default]
    None,
    /// S3 clamped to `value` at every step; contrast against factual.
    Clamp { value: f64 },
    /// S3 clamped to 1 versus S3 clamped to 0.
    FixedContrast,
    /// S3 multiplied by `factor` at every step; contrast against factual.
    Scale { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_steps: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub seed: u64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub intervention: InterventionKind,
}

fn default_burn_in() -> usize {
    100
}

fn default_noise_std() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn new(n_steps: usize, seed: u64) -> Self {
        Self {
            n_steps,
            burn_in: default_burn_in(),
            seed,
            noise_std: default_noise_std(),
            intervention: InterventionKind::None,
        }
    }

    pub fn with_intervention(mut self, intervention: InterventionKind) -> Self {
        self.intervention = intervention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if self.burn_in < INIT_ROWS {
            return Err(Error::Config(format!(
                "burn_in must be at least {INIT_ROWS}, got {}",
                self.burn_in
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        match self.intervention {
            InterventionKind::Scale { factor } if !(factor > 0.0 && factor.is_finite()) => Err(
                Error::Config(format!("scale factor must be positive, got {factor}")),
            ),
            InterventionKind::Clamp { value } if !value.is_finite() => {
                Err(Error::Config("clamp value must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Columns S1, S2 (covariates), S3 (treatment), S4 (outcome).
    pub factual: TimeSeriesFrame,
    /// S4 under the intervened S3 path.
    pub counterfactual_s4: Vec<f64>,
    /// S4 of the arm the counterfactual is contrasted with: the factual S4,
    /// or the S3 = 0 arm for a fixed contrast.
    pub reference_s4: Vec<f64>,
    /// `counterfactual_s4 - reference_s4` per output row.
    pub true_ite: Vec<f64>,
    pub true_ate: f64,
    pub config: SynthConfig,
}

impl SynthOutput {
    /// Per-step effect of the counterfactual arm against the factual arm,
    /// which differs from `true_ite` only for a fixed contrast.
    pub fn single_arm_ite(&self) -> Vec<f64> {
        self.counterfactual_s4
            .iter()
            .zip(&self.factual.outcome().values)
            .map(|(c, f)| c - f)
            .collect()
    }
}

#[inline]
pub fn s1_next(t: usize, s1_lag6: f64, s1_lag10: f64, e1: f64) -> f64 {
    (t as f64 / 10.0).cos() + ((s1_lag6 - s1_lag10).abs() + 1.0).ln() + 0.1 * e1
}

#[inline]
pub fn s2_next(s1_prev: f64, e2: f64) -> f64 {
    1.2 * (s1_prev * s1_prev / 2.0).exp() + e2
}

#[inline]
pub fn s3_next(s1_prev: f64, e3: f64) -> f64 {
    -1.05 * (-s1_prev * s1_prev / 2.0).exp() + e3
}

#[inline]
pub fn s4_next(s1_prev: f64, s3_prev: f64, s4_prev: f64, e4: f64) -> f64 {
    -1.15 * (-s1_prev * s1_prev / 2.0).exp()
        + 1.35 * (-s3_prev * s3_prev / 2.0).exp()
        + 0.28 * (-s4_prev * s4_prev / 2.0).exp()
        + e4
}

/// All random inputs of one realization: initial rows and per-step noise,
/// the latter already multiplied by `noise_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub init: [Vec<f64>; 4],
    pub eps: [Vec<f64>; 4],
}

impl Noise {
    pub fn draw(config: &SynthConfig) -> Self {
        let total = config.burn_in + config.n_steps;
        let mut init_rng = rng::stream(config.seed, "synth/init", 0);
        let init = std::array::from_fn(|_| {
            (0..INIT_ROWS)
                .map(|_| init_rng.sample::<f64, _>(StandardNormal))
                .collect()
        });
        let mut eps_rng = rng::stream(config.seed, "synth/noise", 0);
        let mut eps: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(total));
        for _ in 0..total {
            for series in eps.iter_mut() {
                series.push(config.noise_std * eps_rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self { init, eps }
    }
}

/// Covariate and treatment paths over the full (burn-in included) horizon.
struct Drivers {
    s1: Vec<f64>,
    s2: Vec<f64>,
    s3: Vec<f64>,
}

fn simulate_drivers(noise: &Noise, total: usize) -> Drivers {
    let mut s1 = vec![0.0; total];
    let mut s2 = vec![0.0; total];
    let mut s3 = vec![0.0; total];
    let m = total.min(INIT_ROWS);
    s1[..m].copy_from_slice(&noise.init[0][..m]);
    s2[..m].copy_from_slice(&noise.init[1][..m]);
    s3[..m].copy_from_slice(&noise.init[2][..m]);
    for t in INIT_ROWS..total {
        s1[t] = s1_next(t, s1[t - 6], s1[t - 10], noise.eps[0][t]);
        s2[t] = s2_next(s1[t - 1], noise.eps[1][t]);
        s3[t] = s3_next(s1[t - 1], noise.eps[2][t]);
    }
    Drivers { s1, s2, s3 }
}

/// Runs the S4 recursion for a given S3 path.
pub fn simulate_outcome(s1: &[f64], s3: &[f64], e4: &[f64], s4_init: &[f64]) -> Vec<f64> {
    let total = s1.len();
    let mut s4 = vec![0.0; total];
    let start = s4_init.len().min(total);
    s4[..start].copy_from_slice(&s4_init[..start]);
    for t in start.max(1)..total {
        s4[t] = s4_next(s1[t - 1], s3[t - 1], s4[t - 1], e4[t]);
    }
    s4
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    generate_with_noise(config, &Noise::draw(config))
}

pub fn generate_with_noise(config: &SynthConfig, noise: &Noise) -> Result<SynthOutput> {
    config.validate()?;
    let total = config.burn_in + config.n_steps;
    let d = simulate_drivers(noise, total);
    let outcome = |s3: &[f64]| simulate_outcome(&d.s1, s3, &noise.eps[3], &noise.init[3]);
    let factual_s4 = outcome(&d.s3);

    let (cf, reference) = match config.intervention {
        InterventionKind::None => (factual_s4.clone(), factual_s4.clone()),
        InterventionKind::Clamp { value } => (outcome(&vec![value; total]), factual_s4.clone()),
        InterventionKind::FixedContrast => (outcome(&vec![1.0; total]), outcome(&vec![0.0; total])),
        InterventionKind::Scale { factor } => {
            let scaled: Vec<f64> = d.s3.iter().map(|v| factor * v).collect();
            (outcome(&scaled), factual_s4.clone())
        }
    };

    let keep = config.burn_in..total;
    let timestamps = keep.clone().map(|t| Timestamp::Step(t as i64)).collect();
    let factual = TimeSeriesFrame::new(
        timestamps,
        vec![
            Column::new("S1", Role::Covariate, d.s1[keep.clone()].to_vec()),
            Column::new("S2", Role::Covariate, d.s2[keep.clone()].to_vec()),
            Column::new("S3", Role::Treatment, d.s3[keep.clone()].to_vec()),
            Column::new("S4", Role::Outcome, factual_s4[keep.clone()].to_vec()),
        ],
    )?;
    let counterfactual_s4 = cf[keep.clone()].to_vec();
    let reference_s4 = reference[keep].to_vec();
    let true_ite: Vec<f64> = counterfactual_s4
        .iter()
        .zip(&reference_s4)
        .map(|(c, r)| c - r)
        .collect();
    let true_ate = true_ite.iter().sum::<f64>() / true_ite.len() as f64;
    Ok(SynthOutput {
        factual,
        counterfactual_s4,
        reference_s4,
        true_ite,
        true_ate,
        config: config.clone(),
    })
}

/// Single-arm clamp (`treated_value` 0 or 1) against the factual arm.
pub fn intervene_fixed(config: &SynthConfig, treated_value: f64) -> Result<SynthOutput> {
    generate(
        &config
            .clone()
            .with_intervention(InterventionKind::Clamp { value: treated_value }),
    )
}

/// S3 clamped to 1 versus S3 clamped to 0.
pub fn fixed_contrast(config: &SynthConfig) -> Result<SynthOutput> {
    generate(&config.clone().with_intervention(InterventionKind::FixedContrast))
}

pub fn intervene_continuous(config: &SynthConfig, scale: f64) -> Result<SynthOutput> {
    generate(
        &config
            .clone()
            .with_intervention(InterventionKind::Scale { factor: scale }),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub true_ate: f64,
    pub seed: u64,
    pub config: SynthConfig,
}

/// Writes `factual.csv`, `counterfactual.csv` and `truth.json` into `dir`.
pub fn export(output: &SynthOutput, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let factual = dir.join("factual.csv");
    write_csv(&output.factual, &factual)?;

    let cf_path = dir.join("counterfactual.csv");
    let file = std::fs::File::create(&cf_path).map_err(|e| Error::io(&cf_path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(["t", "counterfactual_s4", "reference_s4", "true_ite"])?;
    for (i, ts) in output.factual.timestamps().iter().enumerate() {
        wtr.write_record([
            ts.to_string(),
            format_real(output.counterfactual_s4[i]),
            format_real(output.reference_s4[i]),
            format_real(output.true_ite[i]),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(&cf_path, e))?;

    let truth = dir.join("truth.json");
    let sidecar = TruthSidecar {
        true_ate: output.true_ate,
        seed: output.config.seed,
        config: output.config.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&truth, json).map_err(|e| Error::io(&truth, e))?;
    Ok(vec![factual, cf_path, truth])
}
