//! Multivariate time-series frames, chronological splitting, standardization
//! and lagged-window construction.

use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Treatment,
    Outcome,
    Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timestamp {
    Step(i64),
    Date(NaiveDate),
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Step(t) => write!(f, "{t}"),
            Timestamp::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: Role,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, role: Role, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            role,
            values,
        }
    }
}

/// Maps CSV header names to column roles. Columns not named here are dropped
/// on ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// An aligned multivariate series with exactly one treatment and one outcome
/// column. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<Timestamp>,
    columns: Vec<Column>,
}

impl TimeSeriesFrame {
    pub fn new(timestamps: Vec<Timestamp>, columns: Vec<Column>) -> Result<Self> {
        let n = timestamps.len();
        if n == 0 {
            return Err(Error::Schema("frame must contain at least one row".into()));
        }
        for col in &columns {
            if col.values.len() != n {
                return Err(Error::Schema(format!(
                    "column `{}` has {} values but there are {} timestamps",
                    col.name,
                    col.values.len(),
                    n
                )));
            }
            if let Some(row) = col.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    row,
                    column: col.name.clone(),
                    message: format!("non-finite value {}", col.values[row]),
                });
            }
        }
        let count = |role| columns.iter().filter(|c| c.role == role).count();
        if count(Role::Treatment) != 1 || count(Role::Outcome) != 1 {
            return Err(Error::Schema(
                "exactly one treatment and one outcome column are required".into(),
            ));
        }
        for (row, pair) in timestamps.windows(2).enumerate() {
            let ordered = match (pair[0], pair[1]) {
                (Timestamp::Step(a), Timestamp::Step(b)) => a < b,
                (Timestamp::Date(a), Timestamp::Date(b)) => a < b,
                _ => false,
            };
            if !ordered {
                return Err(Error::Ordering { row: row + 1 });
            }
        }
        Ok(Self {
            timestamps,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn treatment(&self) -> &Column {
        self.columns
            .iter()
            .find(|c| c.role == Role::Treatment)
            .expect("validated frame has a treatment column")
    }

    pub fn outcome(&self) -> &Column {
        self.columns
            .iter()
            .find(|c| c.role == Role::Outcome)
            .expect("validated frame has an outcome column")
    }

    pub fn covariates(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.role == Role::Covariate)
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates().count()
    }

    /// Feature names in window layout order: covariates, then treatment.
    pub fn feature_names(&self) -> Vec<String> {
        self.covariates()
            .chain(std::iter::once(self.treatment()))
            .map(|c| c.name.clone())
            .collect()
    }

    /// Rows `[start, end)` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Split(format!(
                "invalid row range {start}..{end} for a frame of {} rows",
                self.len()
            )));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| Column::new(c.name.clone(), c.role, c.values[start..end].to_vec()))
            .collect();
        Self::new(self.timestamps[start..end].to_vec(), columns)
    }

    /// Concatenates `other` after `self`; schemas must match and timestamps
    /// must keep increasing.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.columns.len() != other.columns.len()
            || self
                .columns
                .iter()
                .zip(&other.columns)
                .any(|(a, b)| a.name != b.name || a.role != b.role)
        {
            return Err(Error::Schema("cannot concatenate frames with different columns".into()));
        }
        let mut timestamps = self.timestamps.clone();
        timestamps.extend_from_slice(&other.timestamps);
        let columns = self
            .columns
            .iter()
            .zip(&other.columns)
            .map(|(a, b)| {
                let mut values = a.values.clone();
                values.extend_from_slice(&b.values);
                Column::new(a.name.clone(), a.role, values)
            })
            .collect();
        Self::new(timestamps, columns)
    }

    /// Returns a copy whose treatment column is replaced.
    pub fn with_treatment(&self, values: Vec<f64>) -> Result<Self> {
        let columns = self
            .columns
            .iter()
            .map(|c| {
                if c.role == Role::Treatment {
                    Column::new(c.name.clone(), c.role, values.clone())
                } else {
                    c.clone()
                }
            })
            .collect();
        Self::new(self.timestamps.clone(), columns)
    }

    /// Drops every covariate column.
    pub fn without_covariates(&self) -> Self {
        Self {
            timestamps: self.timestamps.clone(),
            columns: self
                .columns
                .iter()
                .filter(|c| c.role != Role::Covariate)
                .cloned()
                .collect(),
        }
    }
}

/// Reads a frame from CSV. The timestamp column must be named `t` (integer
/// steps) or `date` (ISO-8601 calendar dates). Data rows are indexed from 0
/// in error messages.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &ColumnSchema) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let (ts_idx, is_date) = match (find("t"), find("date")) {
        (Some(i), _) => (i, false),
        (None, Some(i)) => (i, true),
        (None, None) => {
            return Err(Error::Schema(
                "missing timestamp column (expected `t` or `date`)".into(),
            ))
        }
    };

    let mut wanted: Vec<(String, Role)> = schema
        .covariates
        .iter()
        .map(|c| (c.clone(), Role::Covariate))
        .collect();
    wanted.push((schema.treatment.clone(), Role::Treatment));
    wanted.push((schema.outcome.clone(), Role::Outcome));
    let mut indices = Vec::with_capacity(wanted.len());
    for (name, _) in &wanted {
        match find(name) {
            Some(i) => indices.push(i),
            None => return Err(Error::Schema(format!("missing column `{name}`"))),
        }
    }
    // Frame column order follows the header, not the schema listing.
    let mut order: Vec<usize> = (0..wanted.len()).collect();
    order.sort_by_key(|&k| indices[k]);

    let mut timestamps = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let raw = record.get(ts_idx).unwrap_or("");
        let ts = if is_date {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                .map(Timestamp::Date)
                .map_err(|e| Error::Data {
                    row,
                    column: "date".into(),
                    message: format!("bad date `{raw}`: {e}"),
                })?
        } else {
            raw.parse::<i64>().map(Timestamp::Step).map_err(|e| Error::Data {
                row,
                column: "t".into(),
                message: format!("bad step `{raw}`: {e}"),
            })?
        };
        timestamps.push(ts);
        for (k, &col_idx) in indices.iter().enumerate() {
            let cell = record.get(col_idx).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Data {
                row,
                column: wanted[k].0.clone(),
                message: format!("cannot parse `{cell}` as a real number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row,
                    column: wanted[k].0.clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values[k].push(v);
        }
    }

    let columns = order
        .into_iter()
        .map(|k| Column::new(wanted[k].0.clone(), wanted[k].1, std::mem::take(&mut values[k])))
        .collect();
    TimeSeriesFrame::new(timestamps, columns)
}

/// Formats a value with 17 significant digits, enough to round-trip an f64.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(frame: &TimeSeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(frame, file)
}

pub fn write_csv_to<W: std::io::Write>(frame: &TimeSeriesFrame, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let ts_name = match frame.timestamps[0] {
        Timestamp::Step(_) => "t",
        Timestamp::Date(_) => "date",
    };
    let mut header = vec![ts_name.to_string()];
    header.extend(frame.columns.iter().map(|c| c.name.clone()));
    wtr.write_record(&header)?;
    for (row, ts) in frame.timestamps.iter().enumerate() {
        let mut record = vec![ts.to_string()];
        record.extend(frame.columns.iter().map(|c| format_real(c.values[row])));
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Splits into the first `floor(train_fraction * N)` rows and the rest.
pub fn chronological_split(
    frame: &TimeSeriesFrame,
    train_fraction: f64,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame)> {
    let n = frame.len();
    if n < 2 {
        return Err(Error::Split("frame needs at least 2 rows to split".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Split(format!(
            "fraction {train_fraction} of {n} rows leaves an empty partition"
        )));
    }
    Ok((frame.slice(0, n_train)?, frame.slice(n_train, n)?))
}

/// One supervised example: `lag` consecutive feature rows and the outcome
/// `horizon` steps after the last of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Row-major `lag x n_features`, covariates first and treatment last.
    pub inputs: Vec<f64>,
    pub target: f64,
    pub weight: f64,
    /// Row of the last input step in the frame the window was cut from.
    pub end_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDataset {
    pub windows: Vec<Window>,
    pub lag: usize,
    pub horizon: usize,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    /// Number of leading rows in the source frame borrowed as context from an
    /// earlier partition (zero unless built with a context bridge).
    pub context_rows: usize,
}

impl LaggedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Column index of the treatment inside each input row.
    pub fn treatment_channel(&self) -> usize {
        self.n_features - 1
    }

    pub fn targets(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.target).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.weight).collect()
    }

    /// Row index (in the source frame) of each window's target.
    pub fn target_indices(&self) -> Vec<usize> {
        self.windows
            .iter()
            .map(|w| w.end_index + self.horizon)
            .collect()
    }

    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.windows.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} windows",
                weights.len(),
                self.windows.len()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Weight {
                timestep: self.windows[k].end_index,
                message: format!("weight {} is not a positive finite number", weights[k]),
            });
        }
        for (w, &v) in self.windows.iter_mut().zip(weights) {
            w.weight = v;
        }
        Ok(self)
    }
}

/// Cuts `N - lag - horizon + 1` windows. Window `k` covers rows
/// `[k, k + lag)` and targets row `k + lag + horizon - 1`.
pub fn make_lagged(frame: &TimeSeriesFrame, lag: usize, horizon: usize) -> Result<LaggedDataset> {
    if lag == 0 || horizon == 0 {
        return Err(Error::Window("lag and horizon must both be at least 1".into()));
    }
    let n = frame.len();
    if n < lag + horizon {
        return Err(Error::Window(format!(
            "frame of {n} rows is shorter than lag {lag} + horizon {horizon}"
        )));
    }
    let features: Vec<&[f64]> = frame
        .covariates()
        .chain(std::iter::once(frame.treatment()))
        .map(|c| c.values.as_slice())
        .collect();
    let outcome = &frame.outcome().values;
    let n_features = features.len();
    let windows = (0..=n - lag - horizon)
        .map(|k| {
            let mut inputs = Vec::with_capacity(lag * n_features);
            for row in k..k + lag {
                inputs.extend(features.iter().map(|col| col[row]));
            }
            Window {
                inputs,
                target: outcome[k + lag + horizon - 1],
                weight: 1.0,
                end_index: k + lag - 1,
            }
        })
        .collect();
    Ok(LaggedDataset {
        windows,
        lag,
        horizon,
        n_features,
        feature_names: frame.feature_names(),
        context_rows: 0,
    })
}

/// Windows whose targets cover every row of `test` that has a full window
/// behind it. With `context_bridge` the last `lag + horizon - 1` rows of
/// `train` are prepended so the first test row is already a target; the
/// bridged rows are only ever used as inputs.
pub fn make_test_windows(
    train: &TimeSeriesFrame,
    test: &TimeSeriesFrame,
    lag: usize,
    horizon: usize,
    context_bridge: bool,
) -> Result<LaggedDataset> {
    if !context_bridge {
        return make_lagged(test, lag, horizon);
    }
    let ctx = (lag + horizon).saturating_sub(1).min(train.len());
    let bridged = if ctx == 0 {
        test.clone()
    } else {
        train.slice(train.len() - ctx, train.len())?.concat(test)?
    };
    let mut ds = make_lagged(&bridged, lag, horizon)?;
    ds.context_rows = ctx;
    Ok(ds)
}

/// Per-column affine standardization fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Columns whose variance was zero; their std is forced to 1.
    pub constant: Vec<bool>,
}

impl Standardizer {
    /// Population (denominator N) statistics per column.
    pub fn fit(names: Vec<String>, columns: &[&[f64]]) -> Self {
        let mut means = Vec::with_capacity(columns.len());
        let mut stds = Vec::with_capacity(columns.len());
        let mut constant = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                stds.push(std);
                constant.push(false);
            } else {
                stds.push(1.0);
                constant.push(true);
            }
            means.push(mean);
        }
        Self {
            names,
            means,
            stds,
            constant,
        }
    }

    pub fn fit_frame(frame: &TimeSeriesFrame) -> Self {
        let names = frame.columns().iter().map(|c| c.name.clone()).collect();
        let cols: Vec<&[f64]> = frame.columns().iter().map(|c| c.values.as_slice()).collect();
        Self::fit(names, &cols)
    }

    pub fn has_constant_columns(&self) -> bool {
        self.constant.iter().any(|&c| c)
    }

    #[inline]
    pub fn transform(&self, col: usize, v: f64) -> f64 {
        (v - self.means[col]) / self.stds[col]
    }

    #[inline]
    pub fn inverse(&self, col: usize, z: f64) -> f64 {
        z * self.stds[col] + self.means[col]
    }

    pub fn apply_frame(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.map_frame(frame, |s, i, v| s.transform(i, v))
    }

    pub fn invert_frame(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.map_frame(frame, |s, i, v| s.inverse(i, v))
    }

    fn map_frame(
        &self,
        frame: &TimeSeriesFrame,
        f: impl Fn(&Self, usize, f64) -> f64,
    ) -> Result<TimeSeriesFrame> {
        if frame.columns().len() != self.means.len() {
            return Err(Error::Shape(format!(
                "standardizer has {} columns, frame has {}",
                self.means.len(),
                frame.columns().len()
            )));
        }
        let columns = frame
            .columns()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Column::new(
                    c.name.clone(),
                    c.role,
                    c.values.iter().map(|&v| f(self, i, v)).collect(),
                )
            })
            .collect();
        TimeSeriesFrame::new(frame.timestamps().to_vec(), columns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(n: usize) -> TimeSeriesFrame {
        let ts = (0..n as i64).map(Timestamp::Step).collect();
        TimeSeriesFrame::new(
            ts,
            vec![
                Column::new("z", Role::Covariate, (0..n).map(|i| 100.0 + i as f64).collect()),
                Column::new("x", Role::Treatment, (0..n).map(|i| i as f64).collect()),
                Column::new("y", Role::Outcome, (0..n).map(|i| 1000.0 + i as f64).collect()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn ingest_minimal_csv() {
        let mut csv = String::from("date,gbi,sie\n");
        for d in 1..=10 {
            csv.push_str(&format!("2000-01-{d:02},{}.5,{}\n", 5000 + d, 10 - d));
        }
        let schema = ColumnSchema {
            treatment: "gbi".into(),
            outcome: "sie".into(),
            covariates: vec![],
        };
        let f = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(f.treatment().values[0], 5001.5);
        assert_eq!(f.outcome().values[9], 0.0);
        assert!(matches!(f.timestamps()[0], Timestamp::Date(_)));
    }

    #[test]
    fn ingest_rejects_nan_with_coordinates() {
        let csv = "t,x,y\n0,1,2\n1,NaN,3\n";
        let schema = ColumnSchema {
            treatment: "x".into(),
            outcome: "y".into(),
            covariates: vec![],
        };
        match read_csv(csv.as_bytes(), &schema) {
            Err(Error::Data { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "x");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_missing_column_and_disorder() {
        let schema = ColumnSchema {
            treatment: "x".into(),
            outcome: "y".into(),
            covariates: vec!["z".into()],
        };
        assert!(matches!(
            read_csv("t,x,y\n0,1,2\n".as_bytes(), &schema),
            Err(Error::Schema(_))
        ));
        let schema = ColumnSchema {
            covariates: vec![],
            ..schema
        };
        assert!(matches!(
            read_csv("t,x,y\n0,1,2\n2,1,2\n1,1,2\n".as_bytes(), &schema),
            Err(Error::Ordering { row: 2 })
        ));
    }

    #[test]
    fn split_floor_arithmetic() {
        let (tr, te) = chronological_split(&frame(10), 0.8).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert!(tr.timestamps().last() < te.timestamps().first());
        let (tr, te) = chronological_split(&frame(2), 0.5).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert!(matches!(chronological_split(&frame(5), 0.1), Err(Error::Split(_))));
    }

    #[test]
    fn lagged_windows_count_and_layout() {
        assert_eq!(make_lagged(&frame(10), 3, 1).unwrap().len(), 7);
        assert!(matches!(make_lagged(&frame(4), 3, 2), Err(Error::Window(_))));

        let ds = make_lagged(&frame(10), 2, 1).unwrap();
        let w = &ds.windows[0];
        assert_eq!(ds.n_features, 2);
        assert_eq!(ds.treatment_channel(), 1);
        // rows 0 and 1: (z, x) pairs
        assert_eq!(w.inputs, vec![100.0, 0.0, 101.0, 1.0]);
        assert_eq!(w.target, 1002.0);
        assert_eq!(w.end_index, 1);
        assert_eq!(ds.target_indices()[0], 2);
    }

    #[test]
    fn test_windows_do_not_touch_train_without_bridge() {
        let f = frame(20);
        let (tr, te) = chronological_split(&f, 0.5).unwrap();
        let ds = make_test_windows(&tr, &te, 3, 2, false).unwrap();
        // covariate z = 100 + global row; test starts at global row 10
        for w in &ds.windows {
            assert!(w.inputs.iter().step_by(2).all(|&z| z >= 110.0));
        }
        let bridged = make_test_windows(&tr, &te, 3, 2, true).unwrap();
        assert_eq!(bridged.len(), te.len());
        assert_eq!(bridged.context_rows, 4);
        assert_eq!(bridged.windows[0].target, 1010.0);
        let min_z = bridged
            .windows
            .iter()
            .flat_map(|w| w.inputs.iter().step_by(2))
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_z, 106.0);
    }

    #[test]
    fn standardizer_population_std() {
        let s = Standardizer::fit(vec!["a".into()], &[&[1.0, 2.0, 3.0]]);
        assert_eq!(s.means[0], 2.0);
        let z: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&v| s.transform(0, v)).collect();
        // (1 - 2) / sqrt(2/3)
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z[0] + expected).abs() < 1e-12);
        assert!(z[1].abs() < 1e-12);
        assert!((z[2] - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn standardizer_flags_constant_column() {
        let s = Standardizer::fit(vec!["c".into()], &[&[5.0, 5.0, 5.0]]);
        assert!(s.has_constant_columns());
        assert_eq!(s.stds[0], 1.0);
        assert_eq!(s.transform(0, 5.0), 0.0);
    }

    proptest! {
        #[test]
        fn window_count_identity(n in 2usize..60, lag in 1usize..10, horizon in 1usize..10) {
            let r = make_lagged(&frame(n), lag, horizon);
            if n >= lag + horizon {
                let ds = r.unwrap();
                prop_assert_eq!(ds.len(), n - lag - horizon + 1);
                for w in &ds.windows {
                    prop_assert_eq!(w.inputs.len(), lag * ds.n_features);
                    prop_assert!(w.end_index + horizon < n);
                }
            } else {
                prop_assert!(r.is_err());
            }
        }

        #[test]
        fn standardize_round_trip(values in prop::collection::vec(-1e3f64..1e3, 3..50)) {
            let s = Standardizer::fit(vec!["v".into()], &[&values]);
            let z: Vec<f64> = values.iter().map(|&v| s.transform(0, v)).collect();
            if !s.constant[0] {
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
            for (&v, &zz) in values.iter().zip(&z) {
                let back = s.inverse(0, zz);
                prop_assert!((back - v).abs() <= 1e-10 * v.abs().max(1.0));
            }
        }
    }
}
