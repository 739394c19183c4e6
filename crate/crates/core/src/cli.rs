//! Command-line front end and the end-to-end experiment runner.
//!
//! Every subcommand accepts `--config <json>`; explicit flags override the
//! file, which overrides built-in defaults. Exit codes: 0 on success, 1 on
//! validation errors, 2 on runtime errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::density::WeightVector;
use crate::error::{Error, Result};
use crate::inference::{estimate_late, CiMethod, EffectReport, InterventionSpec};
use crate::metrics::{evaluate_trained, median, train_variant, EvalConfig, EvalSummary, Setting};
use crate::parallel::Exec;
use crate::pom::{balancing_weights, Balancing, PomConfig, PomNetwork};
use crate::synthgen::{self, InterventionKind, SynthConfig, SynthOutput};
use crate::timeseries::{
    format_real, ingest_csv, make_lagged, ColumnSchema, TimeSeriesFrame,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Trend per step used by the documented trend-multiple scenarios.
pub const DOCUMENTED_TREND: f64 = 0.039;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        n_steps: usize,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        schema: ColumnSchema,
    },
}

fn default_burn_in() -> usize {
    100
}

fn default_noise_std() -> f64 {
    1.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_steps: 2500,
            burn_in: default_burn_in(),
            noise_std: default_noise_std(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub eval: EvalConfig,
    pub variants: Vec<Balancing>,
    pub interventions: Vec<InterventionSpec>,
    /// Synthetic data only: also score the treatment-1 versus treatment-0
    /// contrast.
    pub fixed_contrast: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            eval: EvalConfig::default(),
            variants: vec![Balancing::GmmSw],
            interventions: vec![InterventionSpec::Scale { factor: 1.1 }],
            fixed_contrast: false,
            seeds: vec![0],
            output_dir: PathBuf::from("tcinet-out"),
        }
    }
}

impl ExperimentConfig {
    /// Observational workflow on a CSV export: eight-step horizon, mean
    /// replacement, and 2x, 3x, 4x the documented trend.
    pub fn observational(path: impl Into<PathBuf>, schema: ColumnSchema) -> Self {
        let mut cfg = Self {
            data: DataSource::Csv {
                path: path.into(),
                schema,
            },
            interventions: std::iter::once(InterventionSpec::MeanReplace { value: None })
                .chain([2.0, 3.0, 4.0].map(|m| InterventionSpec::AddTrendMultiple {
                    trend: DOCUMENTED_TREND,
                    multiple: m,
                }))
                .collect(),
            ..Self::default()
        };
        cfg.eval.pom.horizon = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        self.eval.pom.validate()?;
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.eval.mc.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        for spec in &self.interventions {
            spec.validate()?;
        }
        match &self.data {
            DataSource::Synthetic {
                n_steps,
                burn_in,
                noise_std,
            } => SynthConfig {
                n_steps: *n_steps,
                burn_in: *burn_in,
                seed: 0,
                noise_std: *noise_std,
                intervention: InterventionKind::None,
            }
            .validate(),
            DataSource::Csv { .. } => {
                if self.fixed_contrast {
                    Err(Error::Config(
                        "fixed_contrast needs synthetic ground truth".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seed: Option<u64>,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub version: String,
    pub status: String,
    pub stages: Vec<StageTiming>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose current checksum differs from the recorded one.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        let mut bad = Vec::new();
        for f in &self.files {
            let p = dir.join(&f.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

struct Recorder {
    root: PathBuf,
    stages: Vec<StageTiming>,
}

impl Recorder {
    fn stage<T>(
        &mut self,
        seed: Option<u64>,
        name: &str,
        f: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: match seed {
                    Some(s) => format!("{name} (seed {s})"),
                    None => name.to_string(),
                },
                source: Box::new(other),
            },
        });
        self.stages.push(StageTiming {
            seed,
            stage: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    fn write_manifest(&self, config_sha256: &str, status: &str) -> Result<()> {
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files)?;
        files.retain(|f| f.path != RunManifest::FILE_NAME);
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            config_sha256: config_sha256.into(),
            version: VERSION.into(),
            status: status.into(),
            stages: self.stages.clone(),
            files,
        };
        let path = self.root.join(RunManifest::FILE_NAME);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            out.push(FileEntry {
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
    }
    Ok(())
}

/// Creates `dir` and proves it is writable before any computation starts.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".tcinet-write-probe");
    fs::write(&probe, b"ok").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_weights_csv(weights: &WeightVector, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_end", "weight", "unclipped"])?;
    for i in 0..weights.len() {
        w.write_record([
            weights.window_ends[i].to_string(),
            format_real(weights.weights[i]),
            format_real(weights.unclipped[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "seed",
    "variant",
    "setting",
    "rmse",
    "late",
    "ci_low",
    "ci_high",
    "true_ate",
    "true_ate_test",
    "pehe",
    "pehe_single_arm",
    "n_test",
];

/// Per-seed rows followed by one median row per (variant, setting).
pub fn write_summary_csv(rows: &[EvalSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.variant.clone(),
            r.setting.clone(),
            format_real(r.rmse),
            format_real(r.late_hat),
            format_real(r.ci_low),
            format_real(r.ci_high),
            opt_real(r.true_ate),
            opt_real(r.true_ate_test),
            opt_real(r.pehe),
            opt_real(r.pehe_single_arm),
            r.n_test.to_string(),
        ])?;
    }
    let mut groups: BTreeMap<(String, String), Vec<&EvalSummary>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.setting.clone()))
            .or_default()
            .push(r);
    }
    for ((variant, setting), g) in groups {
        let med = |f: &dyn Fn(&EvalSummary) -> Option<f64>| -> String {
            let v: Vec<f64> = g.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                String::new()
            } else {
                format_real(median(&v))
            }
        };
        w.write_record([
            "median".to_string(),
            variant,
            setting,
            med(&|r| Some(r.rmse)),
            med(&|r| Some(r.late_hat)),
            med(&|r| Some(r.ci_low)),
            med(&|r| Some(r.ci_high)),
            med(&|r| r.true_ate),
            med(&|r| r.true_ate_test),
            med(&|r| r.pehe),
            med(&|r| r.pehe_single_arm),
            String::new(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summaries: Vec<EvalSummary>,
    pub manifest: RunManifest,
}

fn synth_config(source: &DataSource, seed: u64) -> Option<SynthConfig> {
    match source {
        DataSource::Synthetic {
            n_steps,
            burn_in,
            noise_std,
        } => Some(SynthConfig {
            n_steps: *n_steps,
            burn_in: *burn_in,
            seed,
            noise_std: *noise_std,
            intervention: InterventionKind::None,
        }),
        DataSource::Csv { .. } => None,
    }
}

/// Ground truth for an intervention on the synthetic system, when one exists.
fn synthetic_truth(cfg: &SynthConfig, spec: &InterventionSpec) -> Result<Option<SynthOutput>> {
    Ok(match *spec {
        InterventionSpec::Scale { factor } => Some(synthgen::intervene_continuous(cfg, factor)?),
        InterventionSpec::Clamp { value } => Some(synthgen::intervene_fixed(cfg, value)?),
        _ => None,
    })
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    rec: &mut Recorder,
) -> Result<Vec<EvalSummary>> {
    let dir = config.output_dir.join(format!("seed-{seed}"));
    let eval = EvalConfig {
        pom: PomConfig {
            seed,
            ..config.eval.pom.clone()
        },
        mc: crate::inference::MonteCarloOptions {
            seed,
            ..config.eval.mc.clone()
        },
        ..config.eval.clone()
    };
    let synth = synth_config(&config.data, seed);

    let frame = rec.stage(Some(seed), "data", || {
        let data_dir = dir.join("data");
        create_dir(&data_dir)?;
        match (&synth, &config.data) {
            (Some(cfg), _) => {
                let out = synthgen::generate(cfg)?;
                synthgen::export(&out, &data_dir)?;
                Ok(out.factual)
            }
            (None, DataSource::Csv { path, schema }) => {
                let frame = ingest_csv(path, schema)?;
                crate::timeseries::write_csv(&frame, data_dir.join("input.csv"))?;
                Ok(frame)
            }
            (None, DataSource::Synthetic { .. }) => unreachable!("synthetic source has a config"),
        }
    })?;

    let mut summaries = Vec::new();
    for &variant in &config.variants {
        let vdir = dir.join(variant.label());
        create_dir(&vdir)?;
        let trained = rec.stage(Some(seed), "train", || {
            // weights are recomputed inside train_variant from the same split
            let t = train_variant(variant, &frame, &eval)?;
            write_weights_csv(&t.weights, &vdir.join("weights.csv"))?;
            t.network.save(vdir.join("checkpoint.json"))?;
            t.network.history.write_csv(vdir.join("history.csv"))?;
            Ok(t)
        })?;

        let reports = rec.stage(Some(seed), "infer", || {
            let mut reports = Vec::new();
            for (k, spec) in config.interventions.iter().enumerate() {
                let rep = estimate_late(&trained.network, &trained.test, spec, &eval.mc)?;
                rep.write_json(vdir.join(format!("effect-{k}.json")))?;
                rep.write_predictions_csv(vdir.join(format!("predictions-{k}.csv")))?;
                reports.push(rep);
            }
            Ok(reports)
        })?;

        let rows = rec.stage(Some(seed), "evaluate", || {
            let mut rows = Vec::new();
            for (spec, rep) in config.interventions.iter().zip(&reports) {
                let truth = match &synth {
                    Some(cfg) => synthetic_truth(cfg, spec)?,
                    None => None,
                };
                let row = match (truth, spec) {
                    (Some(truth), InterventionSpec::Scale { factor }) => {
                        evaluate_trained(&trained, &truth, Setting::Continuous { scale: *factor }, &eval)?.0
                    }
                    (truth, _) => observational_summary(&trained, variant, spec, rep, truth.as_ref(), seed)?,
                };
                rows.push(row);
            }
            if config.fixed_contrast {
                if let Some(cfg) = &synth {
                    let truth = synthgen::fixed_contrast(cfg)?;
                    let (row, rep) = evaluate_trained(&trained, &truth, Setting::Fixed, &eval)?;
                    rep.write_json(vdir.join("effect-fixed.json"))?;
                    rows.push(row);
                }
            }
            write_summary_csv(&rows, &vdir.join("summary.csv"))?;
            Ok(rows)
        })?;
        summaries.extend(rows);
    }
    Ok(summaries)
}

fn observational_summary(
    trained: &crate::metrics::TrainedVariant,
    variant: Balancing,
    spec: &InterventionSpec,
    report: &EffectReport,
    truth: Option<&SynthOutput>,
    seed: u64,
) -> Result<EvalSummary> {
    let (true_ate, true_ate_test, pehe) = match truth {
        Some(t) => {
            let rows = trained.target_rows();
            let ite: Vec<f64> = rows.iter().map(|&r| t.true_ite[r]).collect();
            (
                Some(t.true_ate),
                Some(ite.iter().sum::<f64>() / ite.len() as f64),
                Some(crate::metrics::pehe(&ite, &report.effects)?),
            )
        }
        None => (None, None, None),
    };
    Ok(EvalSummary {
        variant: variant.label().into(),
        setting: spec.to_string(),
        seed,
        rmse: trained.rmse,
        late_hat: report.late,
        ci_low: report.ci_low,
        ci_high: report.ci_high,
        true_ate,
        true_ate_test,
        pehe,
        pehe_single_arm: None,
        n_test: report.effects.len(),
    })
}

/// Runs data, weights, training, inference and evaluation for every seed and
/// variant, writing per-seed directories, `aggregate.csv` and the manifest.
/// A failing stage aborts the run; the manifest then records what was
/// written so far.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let root = config.output_dir.clone();
    ensure_writable(&root)?;
    let digest = config.digest()?;
    write_text(&root.join("config.json"), &serde_json::to_string_pretty(config)?)?;
    let mut rec = Recorder {
        root: root.clone(),
        stages: Vec::new(),
    };

    let mut summaries = Vec::new();
    for &seed in &config.seeds {
        match run_seed(config, seed, &mut rec) {
            Ok(rows) => summaries.extend(rows),
            Err(e) => {
                rec.write_manifest(&digest, &format!("failed: {e}"))?;
                return Err(e);
            }
        }
    }
    let agg = rec.stage(None, "aggregate", || {
        write_summary_csv(&summaries, &root.join("aggregate.csv"))
    });
    if let Err(e) = agg {
        rec.write_manifest(&digest, &format!("failed: {e}"))?;
        return Err(e);
    }
    rec.write_manifest(&digest, "complete")?;
    Ok(ExperimentResult {
        summaries,
        manifest: RunManifest::load(&root)?,
    })
}

/// Seed lists like `1..5` (inclusive), `1,2,3`, or a single value.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list `{s}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

// ---------------------------------------------------------------- arguments

#[derive(Debug, Parser)]
#[command(name = "tcinet", version, about = "Lagged treatment-effect estimation for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic four-series system with ground truth.
    Synth(SynthArgs),
    /// Compute balancing weights for a CSV series.
    Weights(WeightsArgs),
    /// Train the potential-outcome network on a CSV series.
    Train(TrainArgs),
    /// Estimate intervention effects with a trained checkpoint.
    Infer(InferArgs),
    /// Score balancing variants on synthetic data across seeds.
    Evaluate(EvaluateArgs),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// `none`, `scale:F`, `clamp:V` or `fixed_contrast`.
    #[arg(long)]
    pub intervention: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Input CSV with a `t` or `date` column.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON column schema: `{"treatment": .., "outcome": .., "covariates": [..]}`.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long)]
    pub outcome: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub lag: Option<usize>,
    /// `iptw` or `gmm_sw`.
    #[arg(long)]
    pub method: Option<Balancing>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub lag: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub balancing: Option<Balancing>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// `scale:F`, `clamp:V`, `trend:T[xM]`, `mean_replace[:V]`, or a path to
    /// a JSON intervention. Repeatable.
    #[arg(long)]
    pub intervention: Vec<String>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw separate dropout masks for the two arms.
    #[arg(long)]
    pub unpaired: bool,
    /// Percentile-bootstrap interval with this many resamples.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Also write `plot-<k>.csv` with timestamp, factual and counterfactual means.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `1..5` or `1,2,3`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Balancing>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_frame(args: &DataArgs, config: &ExperimentConfig) -> Result<TimeSeriesFrame> {
    let (cfg_path, cfg_schema) = match &config.data {
        DataSource::Csv { path, schema } => (Some(path.clone()), Some(schema.clone())),
        DataSource::Synthetic { .. } => (None, None),
    };
    let path = args
        .data
        .clone()
        .or(cfg_path)
        .ok_or_else(|| Error::Config("no input CSV given (--data)".into()))?;
    let mut schema = match &args.schema {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => cfg_schema.unwrap_or_else(|| ColumnSchema {
            treatment: "S3".into(),
            outcome: "S4".into(),
            covariates: vec!["S1".into(), "S2".into()],
        }),
    };
    if let Some(t) = &args.treatment {
        schema.treatment = t.clone();
    }
    if let Some(o) = &args.outcome {
        schema.outcome = o.clone();
    }
    if let Some(c) = &args.covariates {
        schema.covariates = c.clone();
    }
    ingest_csv(path, &schema)
}

fn parse_intervention_arg(s: &str) -> Result<InterventionSpec> {
    let p = Path::new(s);
    if s.ends_with(".json") && p.exists() {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let spec: InterventionSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    } else {
        s.parse()
    }
}

fn synth_kind(s: &str) -> Result<InterventionKind> {
    Ok(match s {
        "none" => InterventionKind::None,
        "fixed_contrast" => InterventionKind::FixedContrast,
        other => match other.parse::<InterventionSpec>()? {
            InterventionSpec::Scale { factor } => InterventionKind::Scale { factor },
            InterventionSpec::Clamp { value } => InterventionKind::Clamp { value },
            _ => {
                return Err(Error::Config(format!(
                    "the synthetic generator supports none, scale, clamp and fixed_contrast, not `{other}`"
                )))
            }
        },
    })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let (n0, b0, s0) = match base.data {
        DataSource::Synthetic {
            n_steps,
            burn_in,
            noise_std,
        } => (n_steps, burn_in, noise_std),
        DataSource::Csv { .. } => (2500, default_burn_in(), default_noise_std()),
    };
    let cfg = SynthConfig {
        n_steps: a.n.unwrap_or(n0),
        burn_in: a.burn_in.unwrap_or(b0),
        seed: a.seed.or(base.seeds.first().copied()).unwrap_or(0),
        noise_std: a.noise_std.unwrap_or(s0),
        intervention: match &a.intervention {
            Some(s) => synth_kind(s)?,
            None => InterventionKind::None,
        },
    };
    ensure_writable(&a.out)?;
    let out = synthgen::generate(&cfg)?;
    for p in synthgen::export(&out, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_weights(a: WeightsArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let frame = resolve_frame(&a.data, &base)?;
    let mut pom = base.eval.pom.clone();
    if let Some(l) = a.lag {
        pom.lag = l;
    }
    if let Some(c) = a.components {
        pom.gmm_components = c;
    }
    if let Some(s) = a.seed {
        pom.seed = s;
    }
    pom.balancing = a.method.unwrap_or(Balancing::GmmSw);
    pom.validate()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_writable(parent)?;
    }
    let w = balancing_weights(&frame, &pom, base.eval.exec)?;
    write_weights_csv(&w, &a.out)?;
    println!(
        "{} weights, mean {:.6}, effective sample size {:.1}",
        w.len(),
        w.mean(),
        w.diagnostics.effective_sample_size
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let frame = resolve_frame(&a.data, &base)?;
    let mut pom = base.eval.pom.clone();
    if let Some(l) = a.lag {
        pom.lag = l;
    }
    if let Some(h) = a.horizon {
        pom.horizon = h;
    }
    if let Some(e) = a.epochs {
        pom.max_epochs = e;
    }
    if let Some(s) = a.seed {
        pom.seed = s;
    }
    if let Some(b) = a.balancing {
        pom.balancing = b;
    } else if let Some(&b) = base.variants.first() {
        pom.balancing = b;
    }
    pom.validate()?;
    ensure_writable(&a.out)?;
    let weights = balancing_weights(&frame, &pom, base.eval.exec)?;
    let ds = make_lagged(&frame, pom.lag, pom.horizon)?;
    let mut net = PomNetwork::build(&pom, ds.n_features)?;
    net.fit(&ds, &weights)?;
    net.save(a.out.join("checkpoint.json"))?;
    net.history.write_csv(a.out.join("history.csv"))?;
    println!(
        "trained {} epochs (best {}, validation loss {:.6})",
        net.history.epochs.len(),
        net.history.best_epoch,
        net.history.best_val_loss
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    let net = PomNetwork::load(&a.checkpoint)?;
    let frame = resolve_frame(&a.data, &base)?;
    let specs: Vec<InterventionSpec> = if a.intervention.is_empty() {
        base.interventions.clone()
    } else {
        a.intervention
            .iter()
            .map(|s| parse_intervention_arg(s))
            .collect::<Result<_>>()?
    };
    let mut mc = base.eval.mc.clone();
    if let Some(n) = a.n_mc {
        mc.n_mc = n;
    }
    if let Some(s) = a.seed {
        mc.seed = s;
    }
    if a.unpaired {
        mc.paired = false;
    }
    if let Some(r) = a.bootstrap {
        mc.ci = CiMethod::Bootstrap { resamples: r };
    }
    ensure_writable(&a.out)?;
    let ds = make_lagged(&frame, net.config.lag, net.config.horizon)?;
    for (k, spec) in specs.iter().enumerate() {
        let rep = estimate_late(&net, &ds, spec, &mc)?;
        rep.write_json(a.out.join(format!("effect-{k}.json")))?;
        rep.write_predictions_csv(a.out.join(format!("predictions-{k}.csv")))?;
        if a.plot_data {
            write_plot_csv(&rep, &frame, &a.out.join(format!("plot-{k}.csv")))?;
        }
        println!(
            "{spec}: late {:.6} [{:.6}, {:.6}]",
            rep.late, rep.ci_low, rep.ci_high
        );
    }
    Ok(())
}

/// Timestamp, factual mean and counterfactual mean per target row.
pub fn write_plot_csv(rep: &EffectReport, frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "factual_mean", "counterfactual_mean"])?;
    for (i, &row) in rep.target_indices.iter().enumerate() {
        w.write_record([
            frame.timestamps()[row].to_string(),
            format_real(rep.factual_mean[i]),
            format_real(rep.counterfactual_mean[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if a.config.is_none() {
        cfg.variants = vec![Balancing::None, Balancing::Iptw, Balancing::GmmSw];
        cfg.fixed_contrast = true;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(n) = a.n {
        if let DataSource::Synthetic { n_steps, .. } = &mut cfg.data {
            *n_steps = n;
        }
    }
    if let Some(v) = &a.variants {
        cfg.variants = v.clone();
    }
    if let Some(e) = a.epochs {
        cfg.eval.pom.max_epochs = e;
    }
    if let Some(n) = a.n_mc {
        cfg.eval.mc.n_mc = n;
    }
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(Error::Config("evaluate needs a synthetic data source".into()));
    }
    cfg.output_dir = a.out.clone();
    let result = run_experiment(&cfg)?;
    let results = a.out.join("results.csv");
    write_summary_csv(&result.summaries, &results)?;
    println!("{}", results.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    let result = run_experiment(&cfg)?;
    println!(
        "{} rows written to {}",
        result.summaries.len(),
        cfg.output_dir.join("aggregate.csv").display()
    );
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
    }
}

/// Sequential execution when the thread cap is one.
pub fn exec_for_threads(threads: Option<usize>) -> Exec {
    match threads {
        Some(1) => Exec::Sequential,
        _ => Exec::Parallel,
    }
}
