//! Forecast aggregation, reference comparison, scoring and point-wise
//! evaluation.
//!
//! All time indices here are 0-based offsets within one process run.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ensure_parent, windowize, LabelMatrix, Trace};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::training::Predictor;

/// Forecasts `[B, D, H]` of one run, keyed by origin.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSet {
    pub run_length: usize,
    pub origins: Vec<usize>,
    pub forecasts: Tensor,
}

impl ForecastSet {
    pub fn width(&self) -> usize {
        self.forecasts.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.forecasts.shape()[2]
    }

    /// `(origin, lead)` pairs forecasting time point `tau`; leads are 1-based.
    pub fn coverage(&self, tau: usize) -> Vec<(usize, usize)> {
        let h = self.horizon();
        self.origins
            .iter()
            .filter(|&&t| t <= tau && tau < t + h)
            .map(|&t| (t, tau - t + 1))
            .collect()
    }
}

/// Per-time-point `D`-vector estimates over a run; `coverage[τ]` counts the
/// forecasts averaged into row `τ` (0 for uncovered rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub width: usize,
    pub values: Vec<f64>,
    pub coverage: Vec<usize>,
}

impl Estimates {
    pub fn len(&self) -> usize {
        self.coverage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coverage.is_empty()
    }

    pub fn row(&self, tau: usize) -> &[f64] {
        &self.values[tau * self.width..(tau + 1) * self.width]
    }

    pub fn column(&self, var: usize) -> Vec<f64> {
        self.values.iter().skip(var).step_by(self.width).copied().collect()
    }
}

/// Running uniform mean of overlapping forecasts; a time point is emitted
/// once no later origin can still forecast it.
#[derive(Clone, Debug)]
pub struct StreamingAggregator {
    width: usize,
    horizon: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
    next: usize,
    last_origin: Option<usize>,
}

impl StreamingAggregator {
    pub fn new(width: usize, horizon: usize) -> Self {
        Self {
            width,
            horizon,
            sums: vec![0.0; width * horizon],
            counts: vec![0; horizon],
            next: 0,
            last_origin: None,
        }
    }

    /// Adds the `D×H` forecast (row-major by variable) made at `origin`.
    /// Origins must be strictly increasing. Returns the finished points.
    pub fn push(&mut self, origin: usize, forecast: &[f64]) -> Result<Vec<(usize, Vec<f64>, usize)>> {
        if self.last_origin.is_some_and(|o| origin <= o) {
            return Err(Error::Data(format!("origin {origin} is not increasing")));
        }
        if forecast.len() != self.width * self.horizon {
            return Err(Error::Data(format!(
                "forecast has {} values, expected {}",
                forecast.len(),
                self.width * self.horizon
            )));
        }
        self.last_origin = Some(origin);
        let done = self.emit_until(origin);
        let (d, h) = (self.width, self.horizon);
        for lead in 0..h {
            let slot = (origin + lead) % h;
            for v in 0..d {
                self.sums[slot * d + v] += forecast[v * h + lead];
            }
            self.counts[slot] += 1;
        }
        Ok(done)
    }

    /// Flushes every remaining point.
    pub fn finish(&mut self) -> Vec<(usize, Vec<f64>, usize)> {
        let end = self.last_origin.map_or(self.next, |o| o + self.horizon);
        self.emit_until(end)
    }

    fn emit_until(&mut self, end: usize) -> Vec<(usize, Vec<f64>, usize)> {
        let mut out = Vec::new();
        let d = self.width;
        while self.next < end {
            let slot = self.next % self.horizon;
            let count = self.counts[slot];
            if count > 0 {
                let sums = &mut self.sums[slot * d..(slot + 1) * d];
                out.push((self.next, sums.iter().map(|s| s / count as f64).collect(), count));
                sums.iter_mut().for_each(|s| *s = 0.0);
                self.counts[slot] = 0;
            }
            self.next += 1;
        }
        out
    }
}

/// Uniform average over every forecast of each time point.
pub fn aggregate(fs: &ForecastSet) -> Result<Estimates> {
    let (d, h) = (fs.width(), fs.horizon());
    let mut est = Estimates {
        width: d,
        values: vec![0.0; fs.run_length * d],
        coverage: vec![0; fs.run_length],
    };
    let mut agg = StreamingAggregator::new(d, h);
    let mut store = |points: Vec<(usize, Vec<f64>, usize)>| -> Result<()> {
        for (tau, v, c) in points {
            if tau >= fs.run_length {
                return Err(Error::Data(format!(
                    "forecast reaches row {tau} beyond run length {}",
                    fs.run_length
                )));
            }
            est.values[tau * d..(tau + 1) * d].copy_from_slice(&v);
            est.coverage[tau] = c;
        }
        Ok(())
    };
    for (b, &origin) in fs.origins.iter().enumerate() {
        let f = &fs.forecasts.data()[b * d * h..(b + 1) * d * h];
        store(agg.push(origin, f)?)?;
    }
    store(agg.finish())?;
    Ok(est)
}

/// Forecasts every window of a single run and aggregates them.
pub fn run_estimates<P: Predictor + ?Sized>(model: &P, run: &Trace) -> Result<Estimates> {
    let windows = windowize(run, model.lookback(), model.horizon())?;
    let forecasts = model.predict(&windows.inputs)?;
    aggregate(&ForecastSet {
        run_length: run.rows(),
        origins: windows.origins,
        forecasts,
    })
}

/// Aggregated forecasts of each training run, averaged at equal in-run offsets.
pub fn reference_forecast<P: Predictor + ?Sized>(model: &P, train: &Trace) -> Result<Estimates> {
    let per_run: Vec<Estimates> = (0..train.run_count())
        .map(|r| run_estimates(model, &train.run(r)?))
        .collect::<Result<_>>()?;
    average_estimates(&per_run)
}

pub(crate) fn average_estimates(runs: &[Estimates]) -> Result<Estimates> {
    let first = runs.first().ok_or_else(|| Error::Data("no runs to average".into()))?;
    let mut out = Estimates {
        width: first.width,
        values: vec![0.0; first.values.len()],
        coverage: first.coverage.clone(),
    };
    for e in runs {
        if e.values.len() != out.values.len() {
            return Err(Error::Data("runs differ in length".into()));
        }
        for (o, v) in out.values.iter_mut().zip(&e.values) {
            *o += v;
        }
        for (c, &ec) in out.coverage.iter_mut().zip(&e.coverage) {
            *c = (*c).min(ec);
        }
    }
    let n = runs.len() as f64;
    out.values.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub index: usize,
    pub deviations: Vec<f64>,
    pub score: f64,
    pub flag: bool,
    pub argmax_variable: usize,
}

/// Mean of the `b` largest entries of `errors`.
pub fn top_b_mean(errors: &[f64], b: usize) -> f64 {
    let mut sorted = errors.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let k = b.clamp(1, sorted.len().max(1));
    sorted.iter().take(k).sum::<f64>() / k as f64
}

/// Scores every time point covered by both estimates.
pub fn score(test: &Estimates, reference: &Estimates, b: usize, th: f64) -> Result<Vec<ScoreRow>> {
    if test.len() != reference.len() || test.width != reference.width {
        return Err(Error::Data(format!(
            "test estimates ({}×{}) and reference ({}×{}) are misaligned",
            test.len(),
            test.width,
            reference.len(),
            reference.width
        )));
    }
    if b == 0 {
        return Err(Error::Data("b must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for tau in 0..test.len() {
        if test.coverage[tau] == 0 || reference.coverage[tau] == 0 {
            continue;
        }
        let deviations: Vec<f64> = test
            .row(tau)
            .iter()
            .zip(reference.row(tau))
            .map(|(a, r)| (a - r).abs())
            .collect();
        let s = top_b_mean(&deviations, b);
        let argmax_variable = deviations
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > deviations[best] { i } else { best });
        rows.push(ScoreRow {
            index: tau,
            score: s,
            flag: s > th,
            argmax_variable,
            deviations,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Point-wise precision, recall and F1; a ratio with a zero denominator is 0.
pub fn evaluate(flags: &[bool], labels: &[bool]) -> Metrics {
    let mut m = Metrics::default();
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn_);
    m.f1 = if m.precision + m.recall == 0.0 {
        0.0
    } else {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    };
    m
}

/// `Σ_b ‖pred_b − target_b‖² / B` over `[B, ...]` tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() == 0 {
        return Err(Error::Shape {
            op: "mse_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let b = pred.shape()[0];
    if b == 0 {
        return Err(Error::Data("mse_loss over an empty batch".into()));
    }
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(0.0, |acc, (p, t)| acc + (p - t) * (p - t));
    Ok(total / b as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub b: usize,
    pub th: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { b: 1, th: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub metrics: Metrics,
    pub b: usize,
    pub th: f64,
    pub lookback: usize,
    pub horizon: usize,
    pub covered_points: usize,
    pub flagged_points: usize,
    /// Boundary points forecast by fewer than `H` origins are scored with
    /// the mean of the forecasts available.
    pub partial_coverage_included: bool,
}

/// Scores, flags and labels of one test run.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub variable_names: Vec<String>,
    pub sample_interval_s: f64,
    pub rows: Vec<ScoreRow>,
    pub labels: Vec<bool>,
    pub summary: DetectionSummary,
    pub test_estimates: Estimates,
    pub reference_estimates: Estimates,
}

/// Full detection on a test run against the training runs.
///
/// `labels` are the per-variable labels of the test run (`N×D`); the global
/// label of a point is their OR.
pub fn detect<P: Predictor + ?Sized>(
    model: &P,
    train: &Trace,
    test: &Trace,
    labels: &LabelMatrix,
    config: DetectionConfig,
) -> Result<DetectionReport> {
    if test.run_count() != 1 || test.rows() != train.run_length() {
        return Err(Error::Data(format!(
            "test trace must be one run of {} rows, got {} rows in {} runs",
            train.run_length(),
            test.rows(),
            test.run_count()
        )));
    }
    if labels.rows() != test.rows() {
        return Err(Error::Data(format!(
            "labels cover {} rows, test run has {}",
            labels.rows(),
            test.rows()
        )));
    }
    let reference = reference_forecast(model, train)?;
    let test_est = run_estimates(model, test)?;
    let rows = score(&test_est, &reference, config.b, config.th)?;
    let point_labels: Vec<bool> = rows.iter().map(|r| labels.any(r.index)).collect();
    let flags: Vec<bool> = rows.iter().map(|r| r.flag).collect();
    let metrics = evaluate(&flags, &point_labels);
    Ok(DetectionReport {
        variable_names: test.variable_names().to_vec(),
        sample_interval_s: test.sample_interval_s(),
        summary: DetectionSummary {
            metrics,
            b: config.b,
            th: config.th,
            lookback: model.lookback(),
            horizon: model.horizon(),
            covered_points: rows.len(),
            flagged_points: flags.iter().filter(|&&f| f).count(),
            partial_coverage_included: true,
        },
        rows,
        labels: point_labels,
        test_estimates: test_est,
        reference_estimates: reference,
    })
}

impl DetectionReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["time", "score", "flag", "label", "argmax_variable"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(self.variable_names.iter().map(|n| format!("dev_{n}")));
        w.write_record(&header)?;
        for (row, &label) in self.rows.iter().zip(&self.labels) {
            let mut rec = vec![
                format!("{}", row.index as f64 * self.sample_interval_s),
                format!("{}", row.score),
                u8::from(row.flag).to_string(),
                u8::from(label).to_string(),
                self.variable_names[row.argmax_variable].clone(),
            ];
            rec.extend(row.deviations.iter().map(|d| format!("{d}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `report.csv`, `summary.json` and `plot/<variable>.csv` under `dir`.
    pub fn save(&self, dir: &Path, test: &Trace) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        let summary = serde_json::to_vec_pretty(&self.summary)?;
        std::fs::write(dir.join("summary.json"), summary)?;
        self.write_plot_data(&dir.join("plot"), test)
    }

    /// One CSV per variable: time, truth, test forecast, reference forecast, flag.
    pub fn write_plot_data(&self, dir: &Path, test: &Trace) -> Result<()> {
        let flagged: std::collections::HashMap<usize, bool> =
            self.rows.iter().map(|r| (r.index, r.flag)).collect();
        for (v, name) in self.variable_names.iter().enumerate() {
            let path = dir.join(format!("{name}.csv"));
            ensure_parent(&path)?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["time", "truth", "test_forecast", "reference_forecast", "flag"])?;
            for tau in 0..test.rows() {
                let fmt_est = |e: &Estimates| {
                    if e.coverage[tau] > 0 {
                        format!("{}", e.row(tau)[v])
                    } else {
                        String::new()
                    }
                };
                w.write_record([
                    format!("{}", tau as f64 * self.sample_interval_s),
                    format!("{}", test.value(tau, v)),
                    fmt_est(&self.test_estimates),
                    fmt_est(&self.reference_estimates),
                    u8::from(flagged.get(&tau).copied().unwrap_or(false)).to_string(),
                ])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
