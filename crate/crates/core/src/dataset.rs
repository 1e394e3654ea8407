//! Trace ingestion, min-max normalization, run split, and (lookback,
//! horizon) windowing.
//!
//! Row indices are 0-based throughout. A window with origin `t` uses rows
//! `t-L..t` as input and rows `t..t+H` as target, so a block of `M` rows
//! yields origins `L..=M-H`, i.e. `M-L-H+1` windows.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_SAMPLE_INTERVAL_S: f64 = 0.1;

/// `M×D` matrix of sensor samples made of `run_count` runs of `run_length` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    values: Vec<f64>,
    variable_names: Vec<String>,
    sample_interval_s: f64,
    run_length: usize,
    run_count: usize,
}

impl Trace {
    pub fn new(
        values: Vec<f64>,
        variable_names: Vec<String>,
        sample_interval_s: f64,
        run_count: usize,
    ) -> Result<Self> {
        let width = variable_names.len();
        if width == 0 {
            return Err(Error::Data("trace has no variables".into()));
        }
        if !values.len().is_multiple_of(width) {
            return Err(Error::Data(format!(
                "{} values do not fill rows of {width} variables",
                values.len()
            )));
        }
        let rows = values.len() / width;
        if run_count == 0 || !rows.is_multiple_of(run_count) {
            return Err(Error::Data(format!(
                "{rows} rows cannot be divided into {run_count} equal runs"
            )));
        }
        for (i, name) in variable_names.iter().enumerate() {
            if variable_names[..i].contains(name) {
                return Err(Error::Data(format!("duplicate variable name `{name}`")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                row: pos / width + 1,
                column: pos % width + 2,
                message: "non-finite value".into(),
            });
        }
        Ok(Self {
            values,
            variable_names,
            sample_interval_s,
            run_length: rows / run_count,
            run_count,
        })
    }

    pub fn rows(&self) -> usize {
        self.run_length * self.run_count
    }

    pub fn width(&self) -> usize {
        self.variable_names.len()
    }

    pub fn run_length(&self) -> usize {
        self.run_length
    }

    pub fn run_count(&self) -> usize {
        self.run_count
    }

    pub fn sample_interval_s(&self) -> f64 {
        self.sample_interval_s
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|n| n == name)
    }

    /// Row-major `M×D` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let d = self.width();
        &self.values[row * d..(row + 1) * d]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.iter().skip(col).step_by(self.width()).copied().collect()
    }

    pub(crate) fn set_column(&mut self, col: usize, column: &[f64]) {
        let d = self.width();
        for (r, &v) in column.iter().enumerate() {
            self.values[r * d + col] = v;
        }
    }

    /// Copies rows `rows` into a new trace split into `run_count` runs.
    pub fn slice_rows(&self, rows: Range<usize>, run_count: usize) -> Result<Trace> {
        if rows.end > self.rows() || rows.start > rows.end {
            return Err(Error::Data(format!(
                "row range {rows:?} outside trace of {} rows",
                self.rows()
            )));
        }
        let d = self.width();
        Trace::new(
            self.values[rows.start * d..rows.end * d].to_vec(),
            self.variable_names.clone(),
            self.sample_interval_s,
            run_count,
        )
    }

    /// Rows of run `index` (0-based) as a single-run trace.
    pub fn run(&self, index: usize) -> Result<Trace> {
        let n = self.run_length;
        self.slice_rows(index * n..(index + 1) * n, 1)
    }

    /// Reads a trace CSV: header `time,<var>...`, one row per sample.
    pub fn read_csv<R: Read>(reader: R, expected_runs: usize) -> Result<Trace> {
        let (names, times, values) = read_matrix(reader)?;
        let interval = if times.len() >= 2 {
            times[1] - times[0]
        } else {
            DEFAULT_SAMPLE_INTERVAL_S
        };
        let rows = times.len();
        if expected_runs == 0 || rows % expected_runs != 0 {
            return Err(Error::Data(format!(
                "{rows} rows are not divisible into {expected_runs} runs"
            )));
        }
        Trace::new(values, names, interval, expected_runs)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_matrix(writer, &self.variable_names, self.sample_interval_s, &self.values, |v| {
            format!("{v}")
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Loads a trace CSV and splits it into `expected_runs` equal runs.
pub fn load_trace(path: &Path, expected_runs: usize) -> Result<Trace> {
    let f = open_input(path, "trace CSV")?;
    Trace::read_csv(std::io::BufReader::new(f), expected_runs)
        .map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Per-variable binary labels with the same shape as a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    pub width: usize,
    pub values: Vec<u8>,
}

impl LabelMatrix {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            width,
            values: vec![0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.width.max(1)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.values[row * self.width + col] = v;
    }

    /// Global label `a(t)`: OR over variables.
    pub fn any(&self, row: usize) -> bool {
        self.values[row * self.width..(row + 1) * self.width]
            .iter()
            .any(|&v| v != 0)
    }

    pub fn write_csv<W: Write>(&self, writer: W, names: &[String], interval: f64) -> Result<()> {
        let as_f: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        write_matrix(writer, names, interval, &as_f, |v| format!("{}", v as u8))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<String>, LabelMatrix)> {
        let (names, _, values) = read_matrix(reader)?;
        let width = names.len();
        let mut out = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Ingest {
                    row: i / width + 1,
                    column: i % width + 2,
                    message: format!("label must be 0 or 1, got {v}"),
                });
            }
            out.push(v as u8);
        }
        Ok((names, LabelMatrix { width, values: out }))
    }
}

pub fn load_labels(path: &Path) -> Result<(Vec<String>, LabelMatrix)> {
    let f = open_input(path, "label CSV")?;
    LabelMatrix::read_csv(std::io::BufReader::new(f))
        .map_err(|e| e.context(format!("reading {}", path.display())))
}

pub(crate) fn open_input(path: &Path, what: &str) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput {
            path: path.to_path_buf(),
            what: format!("{what} not found"),
        },
        _ => e.into(),
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

type Matrix = (Vec<String>, Vec<f64>, Vec<f64>);

fn read_matrix<R: Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some("time") {
        return Err(Error::Ingest {
            row: 0,
            column: 1,
            message: "first header column must be `time`".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    if names.is_empty() {
        return Err(Error::Ingest {
            row: 0,
            column: 2,
            message: "no variable columns".into(),
        });
    }
    let width = names.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for c in 0..=width {
            let cell = record.get(c).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Ingest {
                    row,
                    column: c + 1,
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: c + 1,
                message: format!("not a number: `{cell}`"),
            })?;
            if c == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
        if record.len() > width + 1 {
            return Err(Error::Ingest {
                row,
                column: width + 2,
                message: "more cells than header columns".into(),
            });
        }
    }
    Ok((names, times, values))
}

fn write_matrix<W: Write>(
    writer: W,
    names: &[String],
    interval: f64,
    values: &[f64],
    fmt: impl Fn(f64) -> String,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let width = names.len();
    for (r, row) in values.chunks(width).enumerate() {
        let mut rec = Vec::with_capacity(width + 1);
        rec.push(format!("{}", r as f64 * interval));
        rec.extend(row.iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-variable min/max fitted on the reference rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationRecord {
    /// Maps each variable through `(x-min)/(max-min)`; constant variables map to 0.
    pub fn apply(&self, trace: &Trace) -> Result<Trace> {
        self.check_width(trace)?;
        let d = trace.width();
        let values = trace
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i % d;
                let span = self.max[c] - self.min[c];
                if span > 0.0 {
                    (x - self.min[c]) / span
                } else {
                    0.0
                }
            })
            .collect();
        Trace::new(
            values,
            trace.variable_names().to_vec(),
            trace.sample_interval_s(),
            trace.run_count(),
        )
    }

    /// Inverse map; constant variables come back as their fitted value.
    pub fn denormalize(&self, trace: &Trace) -> Result<Trace> {
        self.check_width(trace)?;
        let d = trace.width();
        let values = trace
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i % d;
                let span = self.max[c] - self.min[c];
                if span > 0.0 {
                    x * span + self.min[c]
                } else {
                    self.min[c]
                }
            })
            .collect();
        Trace::new(
            values,
            trace.variable_names().to_vec(),
            trace.sample_interval_s(),
            trace.run_count(),
        )
    }

    fn check_width(&self, trace: &Trace) -> Result<()> {
        if self.min.len() != trace.width() {
            return Err(Error::Data(format!(
                "normalization record covers {} variables, trace has {}",
                self.min.len(),
                trace.width()
            )));
        }
        Ok(())
    }
}

/// Fits min/max over `fit_rows` and normalizes the whole trace with them.
/// Rows outside the fitted range may leave `[0, 1]`; nothing is clamped.
pub fn fit_normalize(trace: &Trace, fit_rows: Range<usize>) -> Result<(Trace, NormalizationRecord)> {
    if fit_rows.is_empty() || fit_rows.end > trace.rows() {
        return Err(Error::Data(format!(
            "fit rows {fit_rows:?} must be a non-empty range within {} rows",
            trace.rows()
        )));
    }
    let d = trace.width();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for r in fit_rows {
        for (c, &v) in trace.row(r).iter().enumerate() {
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
    }
    let record = NormalizationRecord { min, max };
    Ok((record.apply(trace)?, record))
}

/// Splits a three-run trace into the first two runs (training) and the
/// last run (test).
pub fn split(trace: &Trace) -> Result<(Trace, Trace)> {
    if trace.run_count() != 3 {
        return Err(Error::Data(format!(
            "split expects 3 runs, trace has {}",
            trace.run_count()
        )));
    }
    let n = trace.run_length();
    Ok((trace.slice_rows(0..2 * n, 2)?, trace.slice_rows(2 * n..3 * n, 1)?))
}

/// Paired lookback/horizon tensors cut from a block of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, D, L]`
    pub inputs: Tensor,
    /// `[B, D, H]`
    pub targets: Tensor,
    /// Row index `t` of the first forecast row of each window.
    pub origins: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn lookback(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[2]
    }

    pub fn subset(&self, indices: &[usize]) -> WindowBatch {
        WindowBatch {
            inputs: self.inputs.gather_rows(indices),
            targets: self.targets.gather_rows(indices),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }

    /// Single-variable view: `[B, 1, L]` / `[B, 1, H]`.
    pub fn select_variable(&self, var: usize) -> WindowBatch {
        let pick = |t: &Tensor| {
            let s = t.shape();
            let (b, d, len) = (s[0], s[1], s[2]);
            let mut data = Vec::with_capacity(b * len);
            for i in 0..b {
                let off = (i * d + var) * len;
                data.extend_from_slice(&t.data()[off..off + len]);
            }
            Tensor::new(vec![b, 1, len], data).expect("consistent shape")
        };
        WindowBatch {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            origins: self.origins.clone(),
        }
    }
}

/// Cuts every `(X[t-L..t]ᵀ, X[t..t+H]ᵀ)` pair from the trace rows.
pub fn windowize(trace: &Trace, lookback: usize, horizon: usize) -> Result<WindowBatch> {
    windowize_values(trace.values(), trace.width(), lookback, horizon)
}

pub(crate) fn windowize_values(
    values: &[f64],
    width: usize,
    lookback: usize,
    horizon: usize,
) -> Result<WindowBatch> {
    let rows = values.len() / width;
    if lookback == 0 || horizon == 0 {
        return Err(Error::Data("lookback and horizon must be at least 1".into()));
    }
    if rows < lookback + horizon {
        return Err(Error::EmptyBatch {
            rows,
            lookback,
            horizon,
        });
    }
    let origins: Vec<usize> = (lookback..=rows - horizon).collect();
    let b = origins.len();
    let mut inputs = Vec::with_capacity(b * width * lookback);
    let mut targets = Vec::with_capacity(b * width * horizon);
    for &t in &origins {
        for c in 0..width {
            inputs.extend((t - lookback..t).map(|r| values[r * width + c]));
        }
        for c in 0..width {
            targets.extend((t..t + horizon).map(|r| values[r * width + c]));
        }
    }
    Ok(WindowBatch {
        inputs: Tensor::new(vec![b, width, lookback], inputs)?,
        targets: Tensor::new(vec![b, width, horizon], targets)?,
        origins,
    })
}

/// Holds out `round(fraction·B)` windows, drawn without replacement, as a
/// validation batch. Both halves keep their original window order.
pub fn validation_sample(batch: &WindowBatch, fraction: f64, seed: u64) -> (WindowBatch, WindowBatch) {
    let b = batch.len();
    let val_size = ((fraction * b as f64).round() as usize).min(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, b, val_size).into_vec();
    chosen.sort_unstable();
    let mut is_val = vec![false; b];
    for &i in &chosen {
        is_val[i] = true;
    }
    let train: Vec<usize> = (0..b).filter(|&i| !is_val[i]).collect();
    (batch.subset(&train), batch.subset(&chosen))
}
