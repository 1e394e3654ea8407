//! Seeded recipe-like synthetic traces and labelled anomaly injection.
//!
//! Injection works in test-run coordinates: index 0 is the first row of the
//! last run of the trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMatrix, Trace, DEFAULT_SAMPLE_INTERVAL_S};
use crate::error::{Error, Result};

pub const DEFAULT_LABEL_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalClass {
    StepLike,
    SmoothNoisy,
    Idle,
}

impl SignalClass {
    pub fn tag(self) -> &'static str {
        match self {
            SignalClass::StepLike => "step",
            SignalClass::SmoothNoisy => "smooth",
            SignalClass::Idle => "idle",
        }
    }
}

/// Variable classes either listed one by one or given as counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariableLayout {
    List(Vec<SignalClass>),
    Counts {
        step_like: usize,
        smooth_noisy: usize,
        idle: usize,
    },
}

impl VariableLayout {
    pub fn classes(&self) -> Vec<SignalClass> {
        match self {
            VariableLayout::List(v) => v.clone(),
            VariableLayout::Counts {
                step_like,
                smooth_noisy,
                idle,
            } => std::iter::repeat_n(SignalClass::StepLike, *step_like)
                .chain(std::iter::repeat_n(SignalClass::SmoothNoisy, *smooth_noisy))
                .chain(std::iter::repeat_n(SignalClass::Idle, *idle))
                .collect(),
        }
    }
}

fn default_run_count() -> usize {
    3
}
fn default_noise() -> f64 {
    0.01
}
fn default_interval() -> f64 {
    DEFAULT_SAMPLE_INTERVAL_S
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub seed: u64,
    pub variables: VariableLayout,
    pub run_length: usize,
    #[serde(default = "default_run_count")]
    pub run_count: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Maximum per-run shift of the whole schedule, in samples.
    #[serde(default)]
    pub jitter: usize,
    #[serde(default = "default_interval")]
    pub sample_interval_s: f64,
}

impl RecipeSpec {
    /// Half step-like; a third of the rest idle and the remainder smooth.
    pub fn mixed(width: usize, run_length: usize, seed: u64) -> Self {
        let step_like = width.div_ceil(2);
        let idle = (width - step_like) / 3;
        Self {
            seed,
            variables: VariableLayout::Counts {
                step_like,
                smooth_noisy: width - step_like - idle,
                idle,
            },
            run_length,
            run_count: 3,
            noise_sigma: default_noise(),
            jitter: 0,
            sample_interval_s: DEFAULT_SAMPLE_INTERVAL_S,
        }
    }

    pub fn classes(&self) -> Vec<SignalClass> {
        self.variables.classes()
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.classes()
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}_{i:03}", c.tag()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes().is_empty() {
            return Err(Error::Data("recipe has no variables".into()));
        }
        if self.run_length < 20 {
            return Err(Error::Data(format!(
                "run length {} is below the minimum of 20",
                self.run_length
            )));
        }
        if self.run_count == 0 {
            return Err(Error::Data("run count must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Data("noise sigma must be finite and non-negative".into()));
        }
        if 2 * self.jitter >= self.run_length {
            return Err(Error::Data("jitter must be below half the run length".into()));
        }
        Ok(())
    }
}

enum Schedule {
    Step { ends: Vec<usize>, levels: Vec<f64> },
    Smooth { base: f64, ramps: Vec<(f64, f64, f64)> },
    Idle(f64),
}

impl Schedule {
    fn draw(class: SignalClass, n: usize, rng: &mut ChaCha8Rng) -> Self {
        match class {
            SignalClass::StepLike => {
                let k = rng.random_range(3..=8);
                let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = weights.iter().sum();
                let mut ends = Vec::with_capacity(k);
                let mut acc = 0.0;
                for w in &weights[..k - 1] {
                    acc += w;
                    ends.push((acc / total * n as f64).round() as usize);
                }
                ends.push(n);
                let mut levels: Vec<f64> = Vec::with_capacity(k);
                while levels.len() < k {
                    let v: f64 = rng.random_range(0.0..1.0);
                    if levels.last().is_none_or(|&p: &f64| (v - p).abs() >= 0.2) {
                        levels.push(v);
                    }
                }
                Schedule::Step { ends, levels }
            }
            SignalClass::SmoothNoisy => {
                let base = rng.random_range(0.2..0.5);
                let count = rng.random_range(1..=3);
                let ramps = (0..count)
                    .map(|_| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        (
                            sign * rng.random_range(0.15..0.35),
                            rng.random_range(0.1..0.9) * n as f64,
                            rng.random_range(n as f64 / 50.0..n as f64 / 10.0),
                        )
                    })
                    .collect();
                Schedule::Smooth { base, ramps }
            }
            SignalClass::Idle => Schedule::Idle(rng.random_range(0.0..1.0)),
        }
    }

    fn at(&self, t: f64) -> f64 {
        match self {
            Schedule::Step { ends, levels } => {
                let idx = t.max(0.0) as usize;
                let seg = ends.iter().position(|&e| idx < e).unwrap_or(levels.len() - 1);
                levels[seg]
            }
            Schedule::Smooth { base, ramps } => {
                base + ramps
                    .iter()
                    .map(|(a, c, w)| a / (1.0 + (-(t - c) / w).exp()))
                    .sum::<f64>()
            }
            Schedule::Idle(v) => *v,
        }
    }
}

/// Builds a trace of `run_count` repetitions of one randomly drawn recipe.
pub fn generate(spec: &RecipeSpec) -> Result<Trace> {
    spec.validate()?;
    let classes = spec.classes();
    let n = spec.run_length;
    let d = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schedules: Vec<Schedule> = classes.iter().map(|&c| Schedule::draw(c, n, &mut rng)).collect();
    let shifts: Vec<i64> = (0..spec.run_count)
        .map(|_| {
            let j = spec.jitter as i64;
            rng.random_range(-j..=j)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Data(e.to_string()))?;
    let mut values = vec![0.0; spec.run_count * n * d];
    for (r, &shift) in shifts.iter().enumerate() {
        for t in 0..n {
            let local = (t as i64 - shift).clamp(0, n as i64 - 1) as f64;
            for (c, sched) in schedules.iter().enumerate() {
                let mut v = sched.at(local);
                if classes[c] == SignalClass::SmoothNoisy && spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                values[(r * n + t) * d + c] = v;
            }
        }
    }
    Trace::new(values, spec.variable_names(), spec.sample_interval_s, spec.run_count)
}

/// Indices `n` of the first sample of each new level, i.e. every `n` with
/// `|x[n] − x[n−1]| > threshold`.
pub fn detect_edges(column: &[f64], threshold: f64) -> Vec<usize> {
    (1..column.len())
        .filter(|&n| (column[n] - column[n - 1]).abs() > threshold)
        .collect()
}

/// Class of an observed column: constant columns are idle, columns that are
/// flat between at most a tenth of their samples are step-like.
pub fn classify_column(column: &[f64]) -> SignalClass {
    let moves = column.windows(2).filter(|w| (w[1] - w[0]).abs() > 1e-9).count();
    if moves == 0 {
        SignalClass::Idle
    } else if moves * 10 <= column.len().saturating_sub(1) {
        SignalClass::StepLike
    } else {
        SignalClass::SmoothNoisy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnomalyKind {
    AmplitudeShift { delta: f64 },
    /// Positive lag delays the signal.
    TimeShift { lag: i64 },
    /// Positive displacement moves the edge later.
    StepShift { displacement: i64 },
}

impl AnomalyKind {
    pub fn label(&self) -> &'static str {
        match self {
            AnomalyKind::AmplitudeShift { .. } => "amplitude shift",
            AnomalyKind::TimeShift { .. } => "time shift",
            AnomalyKind::StepShift { .. } => "step shift",
        }
    }
}

fn default_tolerance() -> f64 {
    DEFAULT_LABEL_TOLERANCE
}

/// Unknown keys are rejected by [`crate::config::validate_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub target: String,
    #[serde(flatten)]
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
    #[serde(default = "default_tolerance")]
    pub label_tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub variable: String,
    pub categories: Vec<String>,
    pub anomaly_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrace {
    pub trace: Trace,
    pub labels: LabelMatrix,
    pub attacks: Vec<AttackRecord>,
}

impl LabeledTrace {
    pub fn clean(trace: Trace) -> Self {
        let labels = LabelMatrix::zeros(trace.rows(), trace.width());
        Self {
            trace,
            labels,
            attacks: Vec::new(),
        }
    }

    /// Labels of the last run only.
    pub fn test_labels(&self) -> LabelMatrix {
        let n = self.trace.run_length();
        let start = (self.trace.run_count() - 1) * n;
        let w = self.labels.width;
        LabelMatrix {
            width: w,
            values: self.labels.values[start * w..].to_vec(),
        }
    }
}

/// Applies one anomaly to the last run of `trace`.
pub fn inject(trace: &Trace, spec: &AnomalySpec) -> Result<LabeledTrace> {
    inject_many(trace, std::slice::from_ref(spec))
}

/// Applies anomalies in order; labels compare the final column against the
/// clean one.
pub fn inject_many(trace: &Trace, specs: &[AnomalySpec]) -> Result<LabeledTrace> {
    let n = trace.run_length();
    let offset = (trace.run_count() - 1) * n;
    let mut out = trace.clone();
    let mut touched: Vec<(usize, Vec<String>, f64)> = Vec::new();
    for spec in specs {
        let var = trace.variable_index(&spec.target).ok_or_else(|| {
            Error::Injection(format!("unknown target variable `{}`", spec.target))
        })?;
        let full = trace.column(var);
        let class = classify_column(&full);
        if class != SignalClass::StepLike {
            return Err(Error::Injection(format!(
                "target `{}` is {:?}, anomalies are only injected into step-like variables",
                spec.target, class
            )));
        }
        if spec.start >= spec.end || spec.end > n {
            return Err(Error::Injection(format!(
                "segment [{}, {}) is not a non-empty range within the test run of {n} samples",
                spec.start, spec.end
            )));
        }
        let mut col = out.column(var);
        let run = &mut col[offset..];
        apply(run, spec)?;
        out.set_column(var, &col);
        match touched.iter_mut().find(|(v, _, _)| *v == var) {
            Some((_, cats, tol)) => {
                cats.push(spec.kind.label().to_string());
                *tol = tol.min(spec.label_tolerance);
            }
            None => touched.push((var, vec![spec.kind.label().to_string()], spec.label_tolerance)),
        }
    }

    let mut labels = LabelMatrix::zeros(trace.rows(), trace.width());
    let mut attacks = Vec::new();
    for (var, categories, tol) in touched {
        let mut count = 0;
        for r in offset..trace.rows() {
            if (out.value(r, var) - trace.value(r, var)).abs() > tol {
                labels.set(r, var, 1);
                count += 1;
            }
        }
        attacks.push(AttackRecord {
            variable: trace.variable_names()[var].clone(),
            categories,
            anomaly_ratio: count as f64 / n as f64,
        });
    }
    Ok(LabeledTrace {
        trace: out,
        labels,
        attacks,
    })
}

fn apply(run: &mut [f64], spec: &AnomalySpec) -> Result<()> {
    let (t0, t1) = (spec.start, spec.end);
    match spec.kind {
        AnomalyKind::AmplitudeShift { delta } => {
            run[t0..t1].iter_mut().for_each(|v| *v += delta);
        }
        AnomalyKind::TimeShift { lag } => {
            let original = run[t0..t1].to_vec();
            let last = (t1 - t0 - 1) as i64;
            for (i, v) in run[t0..t1].iter_mut().enumerate() {
                *v = original[(i as i64 - lag).clamp(0, last) as usize];
            }
        }
        AnomalyKind::StepShift { displacement } => {
            let edges = detect_edges(run, DEFAULT_EDGE_THRESHOLD);
            let inside: Vec<usize> = edges.iter().copied().filter(|&e| e >= t0 && e < t1).collect();
            let edge = inside
                .iter()
                .copied()
                .min_by_key(|&e| (2 * e).abs_diff(t0 + t1))
                .ok_or_else(|| {
                    Error::Injection(format!("no plateau edge inside segment [{t0}, {t1})"))
                })?;
            let pos = edges.iter().position(|&e| e == edge).unwrap();
            let lower = if pos == 0 { 1 } else { edges[pos - 1] + 1 };
            let upper = edges.get(pos + 1).map_or(run.len() - 1, |&e| e - 1);
            let moved = edge as i64 + displacement;
            if moved < lower as i64 || moved > upper as i64 {
                return Err(Error::Injection(format!(
                    "moving the edge at {edge} by {displacement} leaves its plateau range [{lower}, {upper}]"
                )));
            }
            let moved = moved as usize;
            if moved < edge {
                let level = run[edge];
                run[moved..edge].iter_mut().for_each(|v| *v = level);
            } else {
                let level = run[edge - 1];
                run[edge..moved].iter_mut().for_each(|v| *v = level);
            }
        }
    }
    Ok(())
}

/// One row of the dataset table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub variables: usize,
    pub attacked_variables: usize,
    /// Anomaly categories joined with ` + `; empty for a clean dataset.
    pub categories: String,
    /// Fraction of test-run points carrying at least one label.
    pub anomaly_ratio: f64,
}

pub fn describe(labeled: &LabeledTrace) -> DatasetDescriptor {
    let mut cats: Vec<String> = Vec::new();
    for a in &labeled.attacks {
        for c in &a.categories {
            if !cats.contains(c) {
                cats.push(c.clone());
            }
        }
    }
    let test = labeled.test_labels();
    let rows = test.rows();
    let flagged = (0..rows).filter(|&r| test.any(r)).count();
    DatasetDescriptor {
        variables: labeled.trace.width(),
        attacked_variables: labeled.attacks.len(),
        categories: cats.join(" + "),
        anomaly_ratio: if rows == 0 { 0.0 } else { flagged as f64 / rows as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_trace(n: usize, edge: usize) -> Trace {
        let run: Vec<f64> = (0..n).map(|t| if t < edge { 0.0 } else { 1.0 }).collect();
        let values = [run.clone(), run.clone(), run].concat();
        Trace::new(values, vec!["s".into()], 0.1, 3).unwrap()
    }

    fn spec(kind: AnomalyKind, start: usize, end: usize) -> AnomalySpec {
        AnomalySpec {
            target: "s".into(),
            kind,
            start,
            end,
            label_tolerance: DEFAULT_LABEL_TOLERANCE,
        }
    }

    #[test]
    fn generator_classes_and_determinism() {
        let spec = RecipeSpec {
            variables: VariableLayout::List(vec![
                SignalClass::StepLike,
                SignalClass::SmoothNoisy,
                SignalClass::Idle,
            ]),
            ..RecipeSpec::mixed(3, 200, 4)
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        let idle = a.column(2);
        assert!(idle.iter().all(|&v| v == idle[0]));
        let step = a.column(0);
        assert_eq!(&step[..200], &step[200..400]);
        assert_eq!(&step[..200], &step[400..]);
        let plateaus = detect_edges(&step[..200], 1e-9).len() + 1;
        assert!((3..=8).contains(&plateaus));
        assert_eq!(classify_column(&step), SignalClass::StepLike);
        assert_eq!(classify_column(&a.column(1)), SignalClass::SmoothNoisy);
        assert!(RecipeSpec::mixed(3, 19, 4).validate().is_err());
    }

    #[test]
    fn amplitude_shift_example() {
        let t = step_trace(200, 50);
        let l = inject(&t, &spec(AnomalyKind::AmplitudeShift { delta: 0.3 }, 60, 80)).unwrap();
        let col = l.trace.column(0);
        assert!(col[400 + 60..400 + 80].iter().all(|&v| (v - 1.3).abs() < 1e-12));
        assert_eq!(l.labels.values.iter().filter(|&&v| v == 1).count(), 20);
        assert_eq!(l.attacks[0].anomaly_ratio, 20.0 / 200.0);
        assert_eq!(&col[..400], &t.column(0)[..400]);
    }

    #[test]
    fn zero_lag_is_identity() {
        let t = step_trace(100, 50);
        let l = inject(&t, &spec(AnomalyKind::TimeShift { lag: 0 }, 10, 90)).unwrap();
        assert_eq!(l.trace, t);
        assert!(l.labels.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn time_shift_labels_the_lagged_edge() {
        let t = step_trace(100, 50);
        let l = inject(&t, &spec(AnomalyKind::TimeShift { lag: 7 }, 20, 90)).unwrap();
        let labelled: Vec<usize> = (0..100).filter(|&r| l.test_labels().any(r)).collect();
        assert_eq!(labelled, (50..57).collect::<Vec<_>>());
    }

    #[test]
    fn step_shift_example() {
        let t = step_trace(100, 50);
        let l = inject(&t, &spec(AnomalyKind::StepShift { displacement: -5 }, 30, 70)).unwrap();
        let labelled: Vec<usize> = (0..100).filter(|&r| l.test_labels().any(r)).collect();
        assert_eq!(labelled, (45..50).collect::<Vec<_>>());
        let later = inject(&t, &spec(AnomalyKind::StepShift { displacement: 4 }, 30, 70)).unwrap();
        assert_eq!(later.trace.column(0)[200 + 53], 0.0);
        assert_eq!(later.trace.column(0)[200 + 54], 1.0);

        assert!(inject(&t, &spec(AnomalyKind::StepShift { displacement: 5 }, 0, 40)).is_err());
        assert!(inject(&t, &spec(AnomalyKind::StepShift { displacement: -60 }, 30, 70)).is_err());
    }

    #[test]
    fn step_shift_nearest_midpoint_with_early_ties() {
        let run: Vec<f64> = (0..100).map(|t| if (40..60).contains(&t) { 1.0 } else { 0.0 }).collect();
        let t = Trace::new([run.clone(), run.clone(), run].concat(), vec!["s".into()], 0.1, 3).unwrap();
        // Edges at 40 and 60, midpoint 50: tie, earlier edge moves.
        let l = inject(&t, &spec(AnomalyKind::StepShift { displacement: 2 }, 30, 70)).unwrap();
        let labelled: Vec<usize> = (0..100).filter(|&r| l.test_labels().any(r)).collect();
        assert_eq!(labelled, vec![40, 41]);
    }

    #[test]
    fn rejects_non_step_targets() {
        let values: Vec<f64> = (0..300).map(|i| (i as f64 * 0.1).sin()).collect();
        let t = Trace::new(values, vec!["s".into()], 0.1, 3).unwrap();
        assert!(matches!(
            inject(&t, &spec(AnomalyKind::AmplitudeShift { delta: 0.3 }, 0, 10)),
            Err(Error::Injection(_))
        ));
        let t = step_trace(100, 50);
        assert!(inject(&t, &spec(AnomalyKind::AmplitudeShift { delta: 0.3 }, 90, 101)).is_err());
    }

    #[test]
    fn edge_examples() {
        assert_eq!(detect_edges(&[0.0, 0.0, 1.0, 1.0], 0.5), vec![2]);
        assert!(detect_edges(&[0.3; 10], 0.5).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let col: Vec<f64> = (0..200)
            .map(|t| if t < 120 { 0.0 } else { 1.0 } + noise.sample(&mut rng))
            .collect();
        let brute: Vec<usize> = (1..col.len()).filter(|&i| (col[i] - col[i - 1]).abs() > 0.5).collect();
        assert_eq!(detect_edges(&col, 0.5), vec![120]);
        assert_eq!(brute, vec![120]);
    }

    #[test]
    fn descriptor_rows() {
        let mut values = Vec::new();
        for r in 0..300 {
            let t = r % 100;
            values.push(if t < 50 { 0.0 } else { 1.0 });
            values.push(if t < 30 { 0.2 } else { 0.8 });
            values.push(0.5);
        }
        let names = vec!["a".into(), "b".into(), "c".into()];
        let t = Trace::new(values, names, 0.1, 3).unwrap();
        let clean = describe(&LabeledTrace::clean(t.clone()));
        assert_eq!((clean.attacked_variables, clean.categories.as_str(), clean.anomaly_ratio), (0, "", 0.0));

        let mut a = spec(AnomalyKind::AmplitudeShift { delta: 0.3 }, 0, 33);
        a.target = "a".into();
        let one = describe(&inject(&t, &a).unwrap());
        assert_eq!((one.variables, one.attacked_variables), (3, 1));
        assert_eq!(one.categories, "amplitude shift");
        assert!((one.anomaly_ratio - 0.33).abs() < 1e-12);

        let mut s = spec(AnomalyKind::StepShift { displacement: 10 }, 20, 40);
        s.target = "b".into();
        let two = describe(&inject_many(&t, &[s, a]).unwrap());
        assert_eq!(two.attacked_variables, 2);
        assert_eq!(two.categories, "step shift + amplitude shift");
    }

    proptest! {
        #[test]
        fn labels_match_rediff(delta in -0.5f64..0.5, start in 0usize..90, len in 1usize..40, lag in -20i64..20) {
            let t = step_trace(100, 50);
            let end = (start + len).min(100);
            for kind in [AnomalyKind::AmplitudeShift { delta }, AnomalyKind::TimeShift { lag }] {
                let l = inject(&t, &spec(kind, start, end)).unwrap();
                let (orig, modified) = (t.column(0), l.trace.column(0));
                for r in 0..300 {
                    let differs = (orig[r] - modified[r]).abs() > DEFAULT_LABEL_TOLERANCE;
                    prop_assert_eq!(l.labels.get(r, 0) == 1, differs);
                    if r < 200 {
                        prop_assert_eq!(orig[r], modified[r]);
                    }
                }
            }
        }
    }
}
