//! Run configuration documents and their strict validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::DetectionConfig;
use crate::error::{ConfigIssue, Error, Result};
use crate::harness::{Architecture, DatasetSpec, ExperimentPlan, ModelKind};
use crate::training::TrainingConfig;

/// Model section: forecaster kind, graph sparsity and the shared
/// architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub top_k: usize,
    pub num_stacks: usize,
    pub blocks_per_stack: usize,
    pub basis_dim: usize,
    pub hidden_width: usize,
    pub emb: usize,
    pub input_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            kind: ModelKind::Nbeats,
            top_k: 1,
            num_stacks: a.num_stacks,
            blocks_per_stack: a.blocks_per_stack,
            basis_dim: a.basis_dim,
            hidden_width: a.hidden_width,
            emb: a.emb,
            input_bias: a.input_bias,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            num_stacks: self.num_stacks,
            blocks_per_stack: self.blocks_per_stack,
            basis_dim: self.basis_dim,
            hidden_width: self.hidden_width,
            emb: self.emb,
            input_bias: self.input_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default = "default_windows")]
    pub windows: Vec<(usize, usize)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_windows() -> Vec<(usize, usize)> {
    vec![(10, 3)]
}

impl RunConfig {
    pub fn width(&self) -> usize {
        self.dataset.recipe.classes().len()
    }

    /// A sweep over this configuration's windows for its single model.
    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            datasets: vec![self.dataset.clone()],
            models: vec![self.model.kind],
            windows: self.windows.clone(),
            top_k: vec![self.model.top_k],
            seed: self.seed,
            detection: self.detection,
            training: self.training.clone(),
            out_dir: self.out_dir.clone(),
            workers: 1,
            architecture: self.model.architecture(),
        }
    }
}

/// Parses and validates a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput {
        path: path.to_path_buf(),
        what: format!("configuration ({e})"),
    })?;
    let doc: Value = serde_json::from_str(&text)?;
    validate_config(&doc)
}

/// Checks every key of `doc` and returns the filled-in configuration, or
/// every violation found, each located by its JSON path.
pub fn validate_config(doc: &Value) -> Result<RunConfig> {
    let mut v = Validator::default();
    v.root(doc);
    if !v.issues.is_empty() {
        return Err(Error::Config(v.issues));
    }
    serde_json::from_value(doc.clone()).map_err(|e| {
        Error::Config(vec![ConfigIssue {
            path: "$".into(),
            message: e.to_string(),
        }])
    })
}

#[derive(Default)]
struct Validator {
    issues: Vec<ConfigIssue>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Validator {
    fn issue(&mut self, path: &str, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: if path.is_empty() { "$".into() } else { path.into() },
            message: message.into(),
        });
    }

    /// The object at `path` with unknown and missing keys reported.
    fn object<'a>(
        &mut self,
        value: &'a Value,
        path: &str,
        allowed: &[&str],
        required: &[&str],
    ) -> Option<&'a Map<String, Value>> {
        let Some(map) = value.as_object() else {
            self.issue(path, format!("expected an object, found {}", kind_of(value)));
            return None;
        };
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                self.issue(&join(path, key), format!("unknown key; expected one of {}", allowed.join(", ")));
            }
        }
        for key in required {
            if !map.contains_key(*key) {
                self.issue(&join(path, key), "missing required key");
            }
        }
        Some(map)
    }

    fn uint(&mut self, map: &Map<String, Value>, path: &str, key: &str, min: u64, max: Option<u64>) -> Option<u64> {
        let value = map.get(key)?;
        let path = join(path, key);
        let Some(n) = value.as_u64() else {
            self.issue(&path, format!("expected a non-negative integer, found {}", kind_of(value)));
            return None;
        };
        if n < min || max.is_some_and(|m| n > m) {
            let range = match max {
                Some(m) => format!("[{min}, {m}]"),
                None => format!(">= {min}"),
            };
            self.issue(&path, format!("{n} is out of range; expected {range}"));
            return None;
        }
        Some(n)
    }

    fn int(&mut self, map: &Map<String, Value>, path: &str, key: &str) {
        if let Some(value) = map.get(key) {
            if value.as_i64().is_none() {
                self.issue(&join(path, key), format!("expected an integer, found {}", kind_of(value)));
            }
        }
    }

    /// Checks a number against `lo`/`hi`; the flags make a bound exclusive.
    fn float(&mut self, map: &Map<String, Value>, path: &str, key: &str, lo: (f64, bool), hi: Option<(f64, bool)>) {
        let Some(value) = map.get(key) else { return };
        let path = join(path, key);
        let Some(x) = value.as_f64() else {
            self.issue(&path, format!("expected a number, found {}", kind_of(value)));
            return;
        };
        let low_ok = if lo.1 { x > lo.0 } else { x >= lo.0 };
        let high_ok = hi.is_none_or(|(h, open)| if open { x < h } else { x <= h });
        if !low_ok || !high_ok {
            let left = if lo.1 { "(" } else { "[" };
            let right = match hi {
                Some((h, true)) => format!("{h})"),
                Some((h, false)) => format!("{h}]"),
                None => "inf)".into(),
            };
            self.issue(&path, format!("{x} is out of range; expected {left}{}, {right}", lo.0));
        }
    }

    fn boolean(&mut self, map: &Map<String, Value>, path: &str, key: &str) {
        if let Some(value) = map.get(key) {
            if !value.is_boolean() {
                self.issue(&join(path, key), format!("expected a boolean, found {}", kind_of(value)));
            }
        }
    }

    fn string(&mut self, map: &Map<String, Value>, path: &str, key: &str, choices: &[&str]) -> Option<String> {
        let value = map.get(key)?;
        let path = join(path, key);
        let Some(s) = value.as_str() else {
            self.issue(&path, format!("expected a string, found {}", kind_of(value)));
            return None;
        };
        if !choices.is_empty() && !choices.contains(&s) {
            self.issue(&path, format!("`{s}` is not one of {}", choices.join(", ")));
            return None;
        }
        Some(s.to_string())
    }

    fn root(&mut self, doc: &Value) {
        let allowed = ["dataset", "model", "training", "detection", "windows", "seed", "out_dir"];
        let Some(map) = self.object(doc, "", &allowed, &["dataset"]) else { return };
        let (width, run_length) = match map.get("dataset") {
            Some(d) => self.dataset(d),
            None => (None, None),
        };
        if let Some(m) = map.get("model") {
            self.model(m, width);
        }
        if let Some(t) = map.get("training") {
            self.training(t);
        }
        if let Some(d) = map.get("detection") {
            self.detection(d, width);
        }
        if let Some(w) = map.get("windows") {
            self.windows(w, run_length);
        }
        self.uint(map, "", "seed", 0, None);
        self.string(map, "", "out_dir", &[]);
    }

    /// Returns the variable count and run length when they are valid.
    fn dataset(&mut self, value: &Value) -> (Option<usize>, Option<usize>) {
        let Some(map) = self.object(value, "dataset", &["name", "recipe", "anomalies"], &["name", "recipe"]) else {
            return (None, None);
        };
        self.string(map, "dataset", "name", &[]);
        let mut out = (None, None);
        if let Some(recipe) = map.get("recipe") {
            out = self.recipe(recipe);
        }
        if let Some(list) = map.get("anomalies") {
            match list.as_array() {
                Some(items) => {
                    for (i, item) in items.iter().enumerate() {
                        self.anomaly(item, &format!("dataset.anomalies[{i}]"), out.1);
                    }
                }
                None => self.issue("dataset.anomalies", format!("expected an array, found {}", kind_of(list))),
            }
        }
        out
    }

    fn recipe(&mut self, value: &Value) -> (Option<usize>, Option<usize>) {
        let path = "dataset.recipe";
        let allowed = ["seed", "variables", "run_length", "run_count", "noise_sigma", "jitter", "sample_interval_s"];
        let Some(map) = self.object(value, path, &allowed, &["seed", "variables", "run_length"]) else {
            return (None, None);
        };
        self.uint(map, path, "seed", 0, None);
        let run_length = self.uint(map, path, "run_length", 20, None).map(|n| n as usize);
        self.uint(map, path, "run_count", 2, None);
        self.float(map, path, "noise_sigma", (0.0, false), None);
        self.uint(map, path, "jitter", 0, None);
        self.float(map, path, "sample_interval_s", (0.0, true), None);
        let width = map.get("variables").and_then(|v| self.variables(v));
        (width, run_length)
    }

    fn variables(&mut self, value: &Value) -> Option<usize> {
        let path = "dataset.recipe.variables";
        let classes = ["step_like", "smooth_noisy", "idle"];
        if let Some(list) = value.as_array() {
            let before = self.issues.len();
            for (i, item) in list.iter().enumerate() {
                match item.as_str() {
                    Some(s) if classes.contains(&s) => {}
                    _ => self.issue(&format!("{path}[{i}]"), format!("expected one of {}", classes.join(", "))),
                }
            }
            if list.is_empty() {
                self.issue(path, "at least one variable is required");
            }
            return (self.issues.len() == before && !list.is_empty()).then_some(list.len());
        }
        let map = self.object(value, path, &classes, &[])?;
        let total: Option<u64> = classes
            .iter()
            .map(|c| if map.contains_key(*c) { self.uint(map, path, c, 0, None) } else { Some(0) })
            .sum();
        match total {
            Some(0) => {
                self.issue(path, "at least one variable is required");
                None
            }
            t => t.map(|t| t as usize),
        }
    }

    fn anomaly(&mut self, value: &Value, path: &str, run_length: Option<usize>) {
        let Some(map) = value.as_object() else {
            self.issue(path, format!("expected an object, found {}", kind_of(value)));
            return;
        };
        let categories = ["amplitude_shift", "time_shift", "step_shift"];
        let category = if map.contains_key("category") {
            self.string(map, path, "category", &categories)
        } else {
            self.issue(&join(path, "category"), "missing required key");
            None
        };
        let magnitude = match category.as_deref() {
            Some("amplitude_shift") => Some("delta"),
            Some("time_shift") => Some("lag"),
            Some("step_shift") => Some("displacement"),
            _ => None,
        };
        let mut allowed = vec!["target", "category", "start", "end", "label_tolerance"];
        allowed.extend(magnitude);
        let mut required = vec!["target", "start", "end"];
        required.extend(magnitude);
        if category.is_some() {
            self.object(value, path, &allowed, &required);
        }
        self.string(map, path, "target", &[]);
        let max = run_length.map(|n| n as u64);
        let start = self.uint(map, path, "start", 0, max);
        let end = self.uint(map, path, "end", 1, max);
        if let (Some(s), Some(e)) = (start, end) {
            if s >= e {
                self.issue(&join(path, "end"), format!("end {e} must exceed start {s}"));
            }
        }
        self.float(map, path, "label_tolerance", (0.0, false), None);
        match magnitude {
            Some("delta") => self.float(map, path, "delta", (f64::MIN, false), None),
            Some(key) => self.int(map, path, key),
            None => {}
        }
    }

    fn model(&mut self, value: &Value, width: Option<usize>) {
        let path = "model";
        let allowed = [
            "kind", "top_k", "num_stacks", "blocks_per_stack", "basis_dim", "hidden_width", "emb", "input_bias",
        ];
        let Some(map) = self.object(value, path, &allowed, &[]) else { return };
        self.string(map, path, "kind", &["nbeats", "gnn"]);
        let max_k = width.map(|d| d.saturating_sub(1).max(1) as u64);
        self.uint(map, path, "top_k", 1, max_k);
        for key in ["num_stacks", "blocks_per_stack", "basis_dim", "hidden_width", "emb"] {
            self.uint(map, path, key, 1, None);
        }
        self.boolean(map, path, "input_bias");
    }

    fn training(&mut self, value: &Value) {
        let path = "training";
        let allowed = ["epochs", "patience", "batch", "lr", "plateau", "validation_fraction"];
        let Some(map) = self.object(value, path, &allowed, &[]) else { return };
        self.uint(map, path, "epochs", 1, None);
        self.uint(map, path, "patience", 0, None);
        self.uint(map, path, "batch", 1, None);
        self.float(map, path, "lr", (0.0, true), None);
        self.float(map, path, "validation_fraction", (0.0, false), Some((1.0, true)));
        if let Some(p) = map.get("plateau") {
            let path = "training.plateau";
            if let Some(pm) = self.object(p, path, &["factor", "patience"], &[]) {
                self.float(pm, path, "factor", (0.0, true), Some((1.0, false)));
                self.uint(pm, path, "patience", 1, None);
            }
        }
    }

    fn detection(&mut self, value: &Value, width: Option<usize>) {
        let path = "detection";
        let Some(map) = self.object(value, path, &["b", "th"], &[]) else { return };
        self.uint(map, path, "b", 1, width.map(|d| d as u64));
        self.float(map, path, "th", (0.0, false), None);
    }

    fn windows(&mut self, value: &Value, run_length: Option<usize>) {
        let Some(list) = value.as_array() else {
            self.issue("windows", format!("expected an array of [lookback, horizon] pairs, found {}", kind_of(value)));
            return;
        };
        if list.is_empty() {
            self.issue("windows", "at least one window is required");
        }
        for (i, item) in list.iter().enumerate() {
            let path = format!("windows[{i}]");
            let pair = item.as_array().filter(|a| a.len() == 2).and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)));
            match pair {
                Some((l, h)) if l >= 1 && h >= 1 => {
                    if let Some(n) = run_length {
                        if (l + h) as usize > n {
                            self.issue(&path, format!("lookback + horizon = {} exceeds the run length {n}", l + h));
                        }
                    }
                }
                Some(_) => self.issue(&path, "lookback and horizon must be at least 1"),
                None => self.issue(&path, "expected a [lookback, horizon] pair of integers"),
            }
        }
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() || n.is_i64() => "an integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}
