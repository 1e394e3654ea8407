//! Experiment orchestration: dataset preparation, window/top-K sweeps,
//! ablation averages and parameter-count tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_normalize, load_labels, load_trace, split, windowize, LabelMatrix, NormalizationRecord, Trace};
use crate::detector::{detect, mse_loss, DetectionConfig, DetectionReport};
use crate::error::{Error, Result};
use crate::graphnet::{self, GraphConfig, GraphModel};
use crate::nbeats::{self, NBeatsConfig, NBeatsEnsemble, NBeatsModel};
use crate::synth::{
    describe, detect_edges, generate, inject_many, AnomalyKind, AnomalySpec, DatasetDescriptor,
    LabeledTrace, RecipeSpec, SignalClass, DEFAULT_EDGE_THRESHOLD, DEFAULT_LABEL_TOLERANCE,
};
use crate::training::{Predictor, TrainingConfig};

/// Every lookback/horizon pair of the full grid.
pub const FULL_WINDOWS: [(usize, usize); 6] = [(10, 3), (20, 5), (50, 10), (100, 20), (200, 50), (500, 100)];
/// Default desk-scale subset.
pub const DESK_WINDOWS: [(usize, usize); 4] = [(10, 3), (20, 5), (50, 10), (100, 20)];
pub const DESK_TOP_K: [usize; 3] = [1, 3, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nbeats,
    Gnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Nbeats => "nbeats",
            ModelKind::Gnn => "gnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub recipe: RecipeSpec,
    #[serde(default)]
    pub anomalies: Vec<AnomalySpec>,
}

/// A generated, normalized and injected dataset, split into runs.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub name: String,
    pub labeled: LabeledTrace,
    pub normalization: NormalizationRecord,
    pub train: Trace,
    pub test: Trace,
    pub test_labels: LabelMatrix,
    pub descriptor: DatasetDescriptor,
}

/// Generates the recipe, fits min-max on the training runs, injects the
/// anomalies into the normalized test run and splits.
pub fn prepare_dataset(spec: &DatasetSpec) -> Result<PreparedDataset> {
    let raw = generate(&spec.recipe)?;
    prepare_trace(&spec.name, &raw, &spec.anomalies)
}

pub fn prepare_trace(name: &str, raw: &Trace, anomalies: &[AnomalySpec]) -> Result<PreparedDataset> {
    let n = raw.run_length();
    let (normalized, normalization) = fit_normalize(raw, 0..2 * n)?;
    let labeled = if anomalies.is_empty() {
        LabeledTrace::clean(normalized)
    } else {
        inject_many(&normalized, anomalies).map_err(|e| e.context(format!("dataset `{name}`")))?
    };
    let (train, test) = split(&labeled.trace)?;
    let test_labels = labeled.test_labels();
    let descriptor = describe(&labeled);
    Ok(PreparedDataset {
        name: name.to_string(),
        labeled,
        normalization,
        train,
        test,
        test_labels,
        descriptor,
    })
}

/// Three datasets sharing one mixed recipe, each with a single anomaly:
/// an amplitude shift, a time shift and a step shift, placed on step-like
/// variables where the generated schedule leaves room for them.
pub fn desk_corpus(width: usize, run_length: usize, seed: u64) -> Result<Vec<DatasetSpec>> {
    let recipe = RecipeSpec::mixed(width, run_length, seed);
    let raw = generate(&recipe)?;
    let (normalized, _) = fit_normalize(&raw, 0..2 * run_length)?;
    let n = run_length;
    let classes = recipe.classes();
    let names = recipe.variable_names();
    let step_vars: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == SignalClass::StepLike).collect();
    let shift = (n / 10).max(2);
    let mut used = Vec::new();
    // Hosts the anomaly on the unused step-like variable with the highest
    // candidate score; ties go to the earlier variable.
    type Candidate = Option<(f64, AnomalySpec)>;
    let mut pick = |host: &dyn Fn(&[usize], &[f64]) -> Candidate| -> Result<AnomalySpec> {
        let mut best: Option<(f64, usize, AnomalySpec)> = None;
        for &v in step_vars.iter().filter(|v| !used.contains(*v)) {
            let run = normalized.column(v)[2 * n..].to_vec();
            let edges = detect_edges(&run, DEFAULT_EDGE_THRESHOLD);
            if let Some((score, spec)) = host(&edges, &run) {
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, v, spec));
                }
            }
        }
        let (_, v, mut spec) =
            best.ok_or_else(|| Error::Injection("no step-like variable can host the anomaly".into()))?;
        used.push(v);
        spec.target = names[v].clone();
        Ok(spec)
    };
    let anomaly = |kind, start, end| AnomalySpec {
        target: String::new(),
        kind,
        start,
        end,
        label_tolerance: DEFAULT_LABEL_TOLERANCE,
    };
    let jump = |run: &[f64], e: usize| (run[e] - run[e - 1]).abs();

    let amplitude = pick(&|_, run| {
        let start = n * 2 / 5;
        let seg = &run[start..start + n / 5];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let delta = if mean < 0.5 { 0.4 } else { -0.4 };
        let spread = seg.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
        Some((-spread, anomaly(AnomalyKind::AmplitudeShift { delta }, start, start + n / 5)))
    })?;
    let time = pick(&|edges, run| {
        edges
            .windows(2)
            .filter_map(|w| {
                let (e1, e2) = (w[0], w[1]);
                let start = e1.checked_sub(shift / 2)?;
                let end = e2 + shift + shift / 2;
                (e2 - e1 > shift + 2 && end <= n && start >= 1).then(|| {
                    let score = jump(run, e1).min(jump(run, e2));
                    (score, anomaly(AnomalyKind::TimeShift { lag: shift as i64 }, start, end))
                })
            })
            .fold(None, |best: Candidate, c| match best {
                Some(b) if b.0 >= c.0 => Some(b),
                _ => Some(c),
            })
    })?;
    let displace = (n / 5).max(2);
    let step = pick(&|edges, run| {
        let room = displace + 2;
        edges
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| {
                let next = edges.get(i + 1).copied().unwrap_or(n);
                let prev = if i == 0 { 0 } else { edges[i - 1] };
                let displacement = if next - e > room && e + room < n {
                    displace as i64
                } else if e - prev > room && e > room {
                    -(displace as i64)
                } else {
                    return None;
                };
                Some((jump(run, e), anomaly(AnomalyKind::StepShift { displacement }, e - 1, e + 1)))
            })
            .fold(None, |best: Candidate, c| match best {
                Some(b) if b.0 >= c.0 => Some(b),
                _ => Some(c),
            })
    })?;
    Ok([("amplitude", amplitude), ("time", time), ("step", step)]
        .into_iter()
        .map(|(tag, a)| DatasetSpec {
            name: format!("d{width}-{tag}"),
            recipe: recipe.clone(),
            anomalies: vec![a],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub datasets: Vec<DatasetSpec>,
    pub models: Vec<ModelKind>,
    pub windows: Vec<(usize, usize)>,
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub architecture: Architecture,
}

fn default_top_k() -> Vec<usize> {
    DESK_TOP_K.to_vec()
}
fn default_workers() -> usize {
    1
}

/// Window-independent hyperparameters of both forecasters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub num_stacks: usize,
    pub blocks_per_stack: usize,
    pub basis_dim: usize,
    pub hidden_width: usize,
    pub emb: usize,
    pub input_bias: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        let n = NBeatsConfig::new(1, 1);
        let g = GraphConfig::new(1, 1, 1, 0);
        Self {
            num_stacks: n.num_stacks,
            blocks_per_stack: n.blocks_per_stack,
            basis_dim: n.basis_dim,
            hidden_width: n.hidden_width,
            emb: g.emb,
            input_bias: g.input_bias,
        }
    }
}

impl Architecture {
    pub fn nbeats(&self, lookback: usize, horizon: usize) -> NBeatsConfig {
        NBeatsConfig {
            lookback,
            horizon,
            num_stacks: self.num_stacks,
            blocks_per_stack: self.blocks_per_stack,
            basis_dim: self.basis_dim,
            hidden_width: self.hidden_width,
        }
    }

    pub fn graph(&self, width: usize, lookback: usize, horizon: usize, top_k: usize) -> GraphConfig {
        GraphConfig {
            emb: self.emb,
            input_bias: self.input_bias,
            ..GraphConfig::new(width, lookback, horizon, top_k)
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        for &(l, h) in &self.windows {
            if l == 0 || h == 0 {
                return Err(Error::Data(format!("window ({l}, {h}) must have a positive lookback and horizon")));
            }
            for d in &self.datasets {
                if l + h > d.recipe.run_length {
                    return Err(Error::Data(format!(
                        "window ({l}, {h}) does not fit runs of {} samples in dataset `{}`",
                        d.recipe.run_length, d.name
                    )));
                }
            }
        }
        if self.models.contains(&ModelKind::Gnn) && self.top_k.is_empty() {
            return Err(Error::Data("graph sweeps need at least one top_k".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for (di, _) in self.datasets.iter().enumerate() {
            for &model in &self.models {
                for &(l, h) in &self.windows {
                    let ks: Vec<Option<usize>> = match model {
                        ModelKind::Nbeats => vec![None],
                        ModelKind::Gnn => self.top_k.iter().map(|&k| Some(k)).collect(),
                    };
                    for top_k in ks {
                        cells.push(Cell {
                            dataset: di,
                            model,
                            lookback: l,
                            horizon: h,
                            top_k,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Recipe JSON, model, lookback, horizon and top_k.
type ModelKey = (String, ModelKind, usize, usize, Option<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cell {
    dataset: usize,
    model: ModelKind,
    lookback: usize,
    horizon: usize,
    top_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: ModelKind,
    pub lookback: usize,
    pub horizon: usize,
    pub top_k: Option<usize>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub test_mse: f64,
    pub train_seconds: f64,
    pub test_seconds: f64,
    pub parameters: usize,
    pub error: Option<String>,
}

impl ResultRow {
    fn key(&self) -> (String, ModelKind, usize, usize, Option<usize>) {
        (self.dataset.clone(), self.model, self.lookback, self.horizon, self.top_k)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn find(&self, dataset: &str, model: ModelKind, window: (usize, usize), top_k: Option<usize>) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.model == model && (r.lookback, r.horizon) == window && r.top_k == top_k)
    }

    /// CSV rendering; wall-time columns are left out unless requested.
    pub fn to_csv(&self, with_timing: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "dataset", "model", "lookback", "horizon", "top_k", "f1", "precision", "recall", "test_mse",
            "parameters",
        ];
        if with_timing {
            header.extend(["train_seconds", "test_seconds"]);
        }
        header.push("error");
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.dataset.clone(),
                r.model.as_str().to_string(),
                r.lookback.to_string(),
                r.horizon.to_string(),
                r.top_k.map_or(String::new(), |k| k.to_string()),
                format!("{}", r.f1),
                format!("{}", r.precision),
                format!("{}", r.recall),
                format!("{}", r.test_mse),
                r.parameters.to_string(),
            ];
            if with_timing {
                rec.push(format!("{:.3}", r.train_seconds));
                rec.push(format!("{:.3}", r.test_seconds));
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join("results.csv"), self.to_csv(true)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join("results.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }
}

/// A trained forecaster of either kind.
pub enum TrainedModel {
    Nbeats(NBeatsEnsemble),
    Gnn(GraphModel),
}

impl TrainedModel {
    pub fn predictor(&self) -> &(dyn Predictor + Sync) {
        match self {
            TrainedModel::Nbeats(m) => m,
            TrainedModel::Gnn(m) => m,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            TrainedModel::Nbeats(m) => m.parameter_count(),
            TrainedModel::Gnn(m) => m.parameter_count(),
        }
    }

    pub fn save(&self, dir: &Path, names: &[String], seed: u64) -> Result<()> {
        match self {
            TrainedModel::Nbeats(m) => m.save(dir),
            TrainedModel::Gnn(m) => m.save(&dir.join("model.gnn"), names, seed),
        }
    }

    /// Files written by [`TrainedModel::save`] into `dir`.
    pub fn checkpoint_paths(dir: &Path, model: ModelKind, names: &[String]) -> Vec<PathBuf> {
        match model {
            ModelKind::Nbeats => names.iter().map(|n| dir.join(format!("{n}.nbeats"))).collect(),
            ModelKind::Gnn => vec![dir.join("model.gnn")],
        }
    }

    pub fn load(dir: &Path, model: ModelKind, names: &[String]) -> Result<Self> {
        if let Some(missing) = Self::checkpoint_paths(dir, model, names).into_iter().find(|p| !p.exists()) {
            return Err(Error::MissingInput {
                path: missing,
                what: format!("{} checkpoint", model.as_str()),
            });
        }
        match model {
            ModelKind::Nbeats => Ok(TrainedModel::Nbeats(NBeatsEnsemble::load(dir, names)?)),
            ModelKind::Gnn => Ok(TrainedModel::Gnn(GraphModel::load(&dir.join("model.gnn"))?.0)),
        }
    }
}

/// Trains one forecaster on the training runs of a dataset.
pub fn train_model(
    data: &PreparedDataset,
    model: ModelKind,
    window: (usize, usize),
    top_k: Option<usize>,
    training: &TrainingConfig,
    architecture: &Architecture,
    seed: u64,
) -> Result<TrainedModel> {
    let (l, h) = window;
    let windows = windowize(&data.train, l, h)?;
    match model {
        ModelKind::Nbeats => {
            let (ens, _) = nbeats::train_per_variable(
                &windows,
                data.train.variable_names(),
                architecture.nbeats(l, h),
                training,
                seed,
            )?;
            Ok(TrainedModel::Nbeats(ens))
        }
        ModelKind::Gnn => {
            let config = architecture.graph(data.train.width(), l, h, top_k.unwrap_or(1));
            let (m, _) = graphnet::train(&windows, config, training, seed)?;
            Ok(TrainedModel::Gnn(m))
        }
    }
}

/// Test-run forecast MSE and the detection report of one cell.
pub fn evaluate_model(
    data: &PreparedDataset,
    model: &dyn Predictor,
    detection: DetectionConfig,
) -> Result<(f64, DetectionReport)> {
    let windows = windowize(&data.test, model.lookback(), model.horizon())?;
    let mse = mse_loss(&model.predict(&windows.inputs)?, &windows.targets)?;
    let report = detect(model, &data.train, &data.test, &data.test_labels, detection)?;
    Ok((mse, report))
}

/// `<out>/<dataset>/<model>/<L>x<H>[/k<top_k>]`
pub fn cell_dir(out: &Path, dataset: &str, model: ModelKind, window: (usize, usize), top_k: Option<usize>) -> PathBuf {
    let mut dir = out
        .join(dataset)
        .join(model.as_str())
        .join(format!("{}x{}", window.0, window.1));
    if let Some(k) = top_k {
        dir = dir.join(format!("k{k}"));
    }
    dir
}

impl Cell {
    fn dir(&self, out: &Path, dataset: &str) -> PathBuf {
        cell_dir(out, dataset, self.model, (self.lookback, self.horizon), self.top_k)
    }
}

/// Runs every cell of the plan. Datasets sharing a recipe share their
/// training runs, so each (recipe, model, window, top_k) is trained once
/// and evaluated on all of them. With an output directory, finished cells
/// recorded in `results.json` are skipped and trained models are reloaded
/// from their cell directory instead of retrained.
pub fn run_sweep(plan: &ExperimentPlan) -> Result<ResultTable> {
    plan.validate()?;
    let prepared: Vec<PreparedDataset> = plan.datasets.iter().map(prepare_dataset).collect::<Result<_>>()?;
    let cells = plan.cells();
    let previous = match &plan.out_dir {
        Some(dir) => ResultTable::load(dir)?.unwrap_or_default(),
        None => ResultTable::default(),
    };

    // Group cells by everything that determines the trained model.
    let mut groups: BTreeMap<ModelKey, Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        let recipe = serde_json::to_string(&plan.datasets[c.dataset].recipe)?;
        groups
            .entry((recipe, c.model, c.lookback, c.horizon, c.top_k))
            .or_default()
            .push(i);
    }

    let done: Mutex<Vec<Option<ResultRow>>> = Mutex::new(
        cells
            .iter()
            .map(|c| {
                let name = &plan.datasets[c.dataset].name;
                previous
                    .find(name, c.model, (c.lookback, c.horizon), c.top_k)
                    .filter(|r| r.error.is_none())
                    .cloned()
            })
            .collect(),
    );
    let persist = |rows: &[Option<ResultRow>]| -> Result<()> {
        if let Some(dir) = &plan.out_dir {
            let mut table = previous.clone();
            for row in rows.iter().flatten() {
                match table.rows.iter_mut().find(|r| r.key() == row.key()) {
                    Some(slot) => *slot = row.clone(),
                    None => table.rows.push(row.clone()),
                }
            }
            table.save(dir)?;
        }
        Ok(())
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers.max(1))
        .build()
        .map_err(|e| Error::Data(e.to_string()))?;
    let group_list: Vec<Vec<usize>> = groups.into_values().collect();
    let outcome: Result<()> = pool.install(|| {
        group_list.par_iter().try_for_each(|members| -> Result<()> {
            let pending: Vec<usize> = {
                let done = done.lock().unwrap();
                members.iter().copied().filter(|&i| done[i].is_none()).collect()
            };
            if pending.is_empty() {
                return Ok(());
            }
            let rows = run_group(plan, &prepared, &cells, members, &pending);
            let mut done = done.lock().unwrap();
            for (i, row) in pending.iter().zip(rows) {
                done[*i] = Some(row);
            }
            persist(&done)
        })
    });
    outcome?;

    let rows: Vec<ResultRow> = done.into_inner().unwrap().into_iter().flatten().collect();
    let table = ResultTable { rows };
    persist(&table.rows.iter().cloned().map(Some).collect::<Vec<_>>())?;
    Ok(table)
}

fn run_group(
    plan: &ExperimentPlan,
    prepared: &[PreparedDataset],
    cells: &[Cell],
    members: &[usize],
    pending: &[usize],
) -> Vec<ResultRow> {
    let first = cells[members[0]];
    let seed = plan.seed;
    let window = (first.lookback, first.horizon);
    let names = prepared[first.dataset].train.variable_names().to_vec();

    // Reuse a model saved by an earlier, interrupted run.
    let stored = plan.out_dir.as_ref().and_then(|out| {
        members.iter().find_map(|&i| {
            let dir = cells[i].dir(out, &prepared[cells[i].dataset].name);
            TrainedModel::load(&dir, first.model, &names).ok()
        })
    });
    let started = Instant::now();
    let trained = match stored {
        Some(m) => Ok((m, 0.0)),
        None => train_model(
            &prepared[first.dataset],
            first.model,
            window,
            first.top_k,
            &plan.training,
            &plan.architecture,
            seed,
        )
        .map(|m| (m, started.elapsed().as_secs_f64())),
    };

    pending
        .iter()
        .map(|&i| {
            let cell = cells[i];
            let data = &prepared[cell.dataset];
            let mut row = ResultRow {
                dataset: data.name.clone(),
                model: cell.model,
                lookback: cell.lookback,
                horizon: cell.horizon,
                top_k: cell.top_k,
                f1: 0.0,
                precision: 0.0,
                recall: 0.0,
                test_mse: f64::NAN,
                train_seconds: 0.0,
                test_seconds: 0.0,
                parameters: 0,
                error: None,
            };
            let result = trained.as_ref().map_err(|e| e.to_string()).and_then(|(model, secs)| {
                let t0 = Instant::now();
                let (mse, report) =
                    evaluate_model(data, model.predictor(), plan.detection).map_err(|e| e.to_string())?;
                row.test_seconds = t0.elapsed().as_secs_f64();
                row.train_seconds = *secs;
                row.parameters = model.parameter_count();
                row.test_mse = mse;
                let m = report.summary.metrics;
                (row.f1, row.precision, row.recall) = (m.f1, m.precision, m.recall);
                if let Some(out) = &plan.out_dir {
                    let dir = cell.dir(out, &data.name);
                    model.save(&dir, &names, seed).map_err(|e| e.to_string())?;
                    report.save(&dir.join("detection"), &data.test).map_err(|e| e.to_string())?;
                }
                Ok(())
            });
            if let Err(e) = result {
                row.error = Some(e);
            }
            row
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub top_k: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub test_mse: f64,
    /// Datasets contributing to the means.
    pub count: usize,
}

/// Mean metrics of the graph rows per (top_k, window), over datasets.
/// Failed cells are left out of the means.
pub fn ablation_summary(table: &ResultTable) -> Vec<AblationRow> {
    let mut acc: BTreeMap<(usize, usize, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in &table.rows {
        if let (ModelKind::Gnn, Some(k), None) = (r.model, r.top_k, &r.error) {
            acc.entry((k, r.lookback, r.horizon)).or_default().push(r);
        }
    }
    acc.into_iter()
        .map(|((top_k, lookback, horizon), rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationRow {
                top_k,
                lookback,
                horizon,
                f1: mean(|r| r.f1),
                precision: mean(|r| r.precision),
                recall: mean(|r| r.recall),
                test_mse: mean(|r| r.test_mse),
                count: rows.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub lookback: usize,
    pub horizon: usize,
    pub nbeats_per_variable: usize,
    pub nbeats_total: usize,
    pub gnn: usize,
    /// Per-variable N-BEATS count over the graph model count.
    pub ratio: f64,
    pub nbeats_train_seconds: Option<f64>,
    pub nbeats_test_seconds: Option<f64>,
    pub gnn_train_seconds: Option<f64>,
    pub gnn_test_seconds: Option<f64>,
}

/// Parameter counts of freshly built models for each window, joined with
/// mean wall times from `timings` when given.
pub fn complexity_report(
    width: usize,
    windows: &[(usize, usize)],
    architecture: &Architecture,
    timings: Option<&ResultTable>,
) -> Result<Vec<ComplexityRow>> {
    windows
        .iter()
        .map(|&(l, h)| {
            let per_var = NBeatsModel::build(architecture.nbeats(l, h), 0)?.parameter_count();
            let top_k = if width > 1 { 1 } else { 0 };
            let gnn = GraphModel::build(architecture.graph(width, l, h, top_k), 0)?.parameter_count();
            let mean_time = |model: ModelKind, train: bool| {
                let rows: Vec<f64> = timings?
                    .rows
                    .iter()
                    .filter(|r| r.model == model && (r.lookback, r.horizon) == (l, h) && r.error.is_none())
                    .map(|r| if train { r.train_seconds } else { r.test_seconds })
                    .collect();
                (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
            };
            Ok(ComplexityRow {
                lookback: l,
                horizon: h,
                nbeats_per_variable: per_var,
                nbeats_total: per_var * width,
                gnn,
                ratio: per_var as f64 / gnn as f64,
                nbeats_train_seconds: mean_time(ModelKind::Nbeats, true),
                nbeats_test_seconds: mean_time(ModelKind::Nbeats, false),
                gnn_train_seconds: mean_time(ModelKind::Gnn, true),
                gnn_test_seconds: mean_time(ModelKind::Gnn, false),
            })
        })
        .collect()
}

pub const INJECTED_FILE: &str = "injected.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const DESCRIPTOR_FILE: &str = "descriptor.json";
pub const NORMALIZATION_FILE: &str = "normalization.json";

/// Writes the normalized, injected trace with its labels, descriptor and
/// normalization record into `dir`.
pub fn write_dataset(data: &PreparedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    data.labeled.trace.save(&dir.join(INJECTED_FILE))?;
    data.labeled.labels.write_csv(
        std::fs::File::create(dir.join(LABELS_FILE))?,
        data.labeled.trace.variable_names(),
        data.labeled.trace.sample_interval_s(),
    )?;
    std::fs::write(dir.join(DESCRIPTOR_FILE), serde_json::to_vec_pretty(&data.descriptor)?)?;
    std::fs::write(dir.join(NORMALIZATION_FILE), serde_json::to_vec_pretty(&data.normalization)?)?;
    Ok(())
}

/// Reads back a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path, name: &str, run_count: usize) -> Result<PreparedDataset> {
    let trace = load_trace(&dir.join(INJECTED_FILE), run_count)?;
    let (names, labels) = load_labels(&dir.join(LABELS_FILE))?;
    if names != trace.variable_names() || labels.rows() != trace.rows() {
        return Err(Error::Data(format!(
            "labels in {} do not match the trace's variables and rows",
            dir.join(LABELS_FILE).display()
        )));
    }
    let read_json = |file: &str| -> Result<Vec<u8>> {
        let path = dir.join(file);
        std::fs::read(&path).map_err(|e| Error::MissingInput {
            path,
            what: format!("dataset metadata ({e})"),
        })
    };
    let descriptor: DatasetDescriptor = serde_json::from_slice(&read_json(DESCRIPTOR_FILE)?)?;
    let normalization: NormalizationRecord = serde_json::from_slice(&read_json(NORMALIZATION_FILE)?)?;
    let labeled = LabeledTrace {
        trace,
        labels,
        attacks: Vec::new(),
    };
    let (train, test) = split(&labeled.trace)?;
    let test_labels = labeled.test_labels();
    Ok(PreparedDataset {
        name: name.to_string(),
        labeled,
        normalization,
        train,
        test,
        test_labels,
        descriptor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, k: usize, f1: f64) -> ResultRow {
        ResultRow {
            dataset: dataset.into(),
            model: ModelKind::Gnn,
            lookback: 10,
            horizon: 3,
            top_k: Some(k),
            f1,
            precision: f1,
            recall: f1,
            test_mse: 0.1,
            train_seconds: 1.0,
            test_seconds: 0.1,
            parameters: 1,
            error: None,
        }
    }

    #[test]
    fn ablation_means() {
        let single = ResultTable {
            rows: vec![row("a", 1, 0.8)],
        };
        assert_eq!(ablation_summary(&single)[0].f1, 0.8);
        let mut two = ResultTable {
            rows: vec![row("a", 1, 0.8), row("b", 1, 0.9)],
        };
        let s = ablation_summary(&two);
        assert!((s[0].f1 - 0.85).abs() < 1e-15);
        assert_eq!(s[0].count, 2);
        two.rows[1].error = Some("boom".into());
        assert_eq!(ablation_summary(&two)[0].count, 1);
    }

    #[test]
    fn complexity_rows() {
        let rows = complexity_report(131, &[(10, 3), (200, 50)], &Architecture::default(), None).unwrap();
        assert_eq!(rows[0].nbeats_per_variable, 104_066);
        assert!((rows[0].gnn as f64 - 19_587.0).abs() <= 0.05 * 19_587.0);
        assert_eq!(rows[1].nbeats_per_variable, 155_076);
        let one = complexity_report(1, &[(10, 3)], &Architecture::default(), None).unwrap();
        assert_eq!(one[0].nbeats_total, one[0].nbeats_per_variable);
    }

    #[test]
    fn corpus_is_valid() {
        let corpus = desk_corpus(16, 500, 7).unwrap();
        assert_eq!(corpus.len(), 3);
        for spec in &corpus {
            let data = prepare_dataset(spec).unwrap();
            let r = data.descriptor.anomaly_ratio;
            assert!((0.09..=0.33).contains(&r), "{} ratio {r}", spec.name);
            assert_eq!(data.descriptor.attacked_variables, 1);
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let spec = &desk_corpus(16, 500, 3).unwrap()[1];
        let data = prepare_dataset(spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = read_dataset(dir.path(), &data.name, 3).unwrap();
        assert_eq!(back.test_labels, data.test_labels);
        assert_eq!(back.descriptor, data.descriptor);
        assert_eq!(back.normalization, data.normalization);
        assert!(back.test.values().iter().zip(data.test.values()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cells_and_csv() {
        let plan = ExperimentPlan {
            datasets: desk_corpus(16, 500, 1).unwrap()[..1].to_vec(),
            models: vec![ModelKind::Gnn],
            windows: vec![(10, 3), (20, 5)],
            top_k: vec![1, 3, 6],
            seed: 0,
            detection: DetectionConfig::default(),
            training: TrainingConfig::default(),
            out_dir: None,
            workers: 1,
            architecture: Architecture {
                emb: 8,
                ..Architecture::default()
            },
        };
        assert_eq!(plan.cells().len(), 6);
        let table = ResultTable {
            rows: vec![row("a", 1, 0.5)],
        };
        assert!(!table.to_csv(false).unwrap().contains("train_seconds"));
        assert!(table.to_csv(true).unwrap().contains("train_seconds"));
    }
}
