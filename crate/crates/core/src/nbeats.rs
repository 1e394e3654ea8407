//! Univariate generic-basis N-BEATS, one model per variable.
//!
//! Each stack holds one block whose weights are applied
//! `blocks_per_stack` times. A block maps the running residual through
//! four ReLU layers, projects to backcast and forecast coefficients, and
//! expands them with linear bases:
//!
//! ```text
//! h  = relu(fc4(relu(fc3(relu(fc2(relu(fc1(r))))))))
//! b  = (h·θ_b)·B_b + c_b        f = (h·θ_f)·B_f + c_f
//! r ← r − b                     ŷ ← ŷ + f
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowBatch;
use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::{fit, predict, Forecaster, Predictor, TrainReport, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NBeatsConfig {
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "defaults::stacks")]
    pub num_stacks: usize,
    #[serde(default = "defaults::blocks")]
    pub blocks_per_stack: usize,
    #[serde(default = "defaults::basis")]
    pub basis_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden_width: usize,
}

mod defaults {
    pub fn stacks() -> usize {
        2
    }
    pub fn blocks() -> usize {
        2
    }
    pub fn basis() -> usize {
        4
    }
    pub fn hidden() -> usize {
        128
    }
}

impl NBeatsConfig {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            num_stacks: defaults::stacks(),
            blocks_per_stack: defaults::blocks(),
            basis_dim: defaults::basis(),
            hidden_width: defaults::hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("num_stacks", self.num_stacks),
            ("blocks_per_stack", self.blocks_per_stack),
            ("basis_dim", self.basis_dim),
            ("hidden_width", self.hidden_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Data(format!("N-BEATS {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Trainable parameters of one per-variable model.
    pub fn parameter_count(&self) -> usize {
        let (l, h, w, k) = (self.lookback, self.horizon, self.hidden_width, self.basis_dim);
        let per_stack = (w * l + w) + 3 * (w * w + w) + 2 * (w * k) + (k * l + l) + (k * h + h);
        self.num_stacks * per_stack
    }
}

#[derive(Clone, Copy, Debug)]
struct StackIds {
    fc: [(ParamId, ParamId); 4],
    theta_b: ParamId,
    theta_f: ParamId,
    basis_b: (ParamId, ParamId),
    basis_f: (ParamId, ParamId),
}

/// One univariate forecaster.
#[derive(Clone, Debug)]
pub struct NBeatsModel {
    config: NBeatsConfig,
    store: ParamStore,
    stacks: Vec<StackIds>,
}

impl NBeatsModel {
    /// Parameters drawn uniformly from `±1/√fan_in`.
    pub fn build(config: NBeatsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, h, w, k) = (config.lookback, config.horizon, config.hidden_width, config.basis_dim);
        let mut store = ParamStore::new();
        let mut stacks = Vec::with_capacity(config.num_stacks);
        for s in 0..config.num_stacks {
            let mut dense = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
                let wid = store.add_uniform(format!("stack{s}.{name}.w"), &[fan_in, fan_out], fan_in, &mut rng);
                let bid = bias.then(|| store.add_uniform(format!("stack{s}.{name}.b"), &[fan_out], fan_in, &mut rng));
                (wid, bid)
            };
            let mut fc = Vec::with_capacity(4);
            for i in 0..4 {
                let fan_in = if i == 0 { l } else { w };
                let (wid, bid) = dense(&mut store, &format!("fc{}", i + 1), fan_in, w, true);
                fc.push((wid, bid.unwrap()));
            }
            let (theta_b, _) = dense(&mut store, "theta_b", w, k, false);
            let (theta_f, _) = dense(&mut store, "theta_f", w, k, false);
            let (bb, bbb) = dense(&mut store, "backcast_basis", k, l, true);
            let (bf, bfb) = dense(&mut store, "forecast_basis", k, h, true);
            stacks.push(StackIds {
                fc: [fc[0], fc[1], fc[2], fc[3]],
                theta_b,
                theta_f,
                basis_b: (bb, bbb.unwrap()),
                basis_f: (bf, bfb.unwrap()),
            });
        }
        Ok(Self { config, store, stacks })
    }

    pub fn config(&self) -> &NBeatsConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Forward pass on `[B, L]` inputs. Returns the forecast `[B, H]`, the
    /// final residual `[B, L]` and each block application's backcast.
    pub fn forward_parts(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Vec<Var>)> {
        let b = tape.shape(x)[0];
        let mut residual = x;
        let mut forecast = tape.constant(Tensor::zeros(&[b, self.config.horizon]));
        let mut backcasts = Vec::new();
        for ids in &self.stacks {
            let p = |tape: &mut Tape, id| tape.param(&self.store, id);
            let fc: Vec<(Var, Var)> = ids.fc.iter().map(|&(w, c)| (p(tape, w), p(tape, c))).collect();
            let theta_b = p(tape, ids.theta_b);
            let theta_f = p(tape, ids.theta_f);
            let basis_b = (p(tape, ids.basis_b.0), p(tape, ids.basis_b.1));
            let basis_f = (p(tape, ids.basis_f.0), p(tape, ids.basis_f.1));
            for _ in 0..self.config.blocks_per_stack {
                let mut hidden = residual;
                for &(w, c) in &fc {
                    let z = tape.matmul(hidden, w)?;
                    let z = tape.add_bcast(z, c)?;
                    hidden = tape.relu(z)?;
                }
                let cb = tape.matmul(hidden, theta_b)?;
                let cf = tape.matmul(hidden, theta_f)?;
                let back = tape.matmul(cb, basis_b.0)?;
                let back = tape.add_bcast(back, basis_b.1)?;
                let fore = tape.matmul(cf, basis_f.0)?;
                let fore = tape.add_bcast(fore, basis_f.1)?;
                residual = tape.sub(residual, back)?;
                forecast = tape.add(forecast, fore)?;
                backcasts.push(back);
            }
        }
        Ok((forecast, residual, backcasts))
    }

    pub fn to_checkpoint(&self, variable: &str, seed: u64) -> Checkpoint {
        Checkpoint::from_store(
            serde_json::json!({"kind": "nbeats", "variable": variable, "config": self.config}),
            seed,
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: NBeatsConfig = serde_json::from_value(
            ckpt.architecture
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing N-BEATS config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad N-BEATS config: {e}")))?;
        let mut model = Self::build(config, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }
}

impl Forecaster for NBeatsModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[B, 1, L]` → `[B, 1, H]`.
    fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let s = tape.shape(inputs).to_vec();
        if s.len() != 3 || s[1] != 1 || s[2] != self.config.lookback {
            return Err(Error::Shape {
                op: "nbeats",
                left: s,
                right: vec![1, self.config.lookback],
            });
        }
        let x = tape.reshape(inputs, &[s[0], s[2]])?;
        let (forecast, _, _) = self.forward_parts(tape, x)?;
        tape.reshape(forecast, &[s[0], 1, self.config.horizon])
    }
}

/// Independent per-variable models forming a multivariate forecaster.
#[derive(Clone, Debug)]
pub struct NBeatsEnsemble {
    pub variable_names: Vec<String>,
    pub models: Vec<NBeatsModel>,
    pub seed: u64,
}

impl NBeatsEnsemble {
    pub fn config(&self) -> &NBeatsConfig {
        self.models[0].config()
    }

    pub fn parameter_count(&self) -> usize {
        self.models.iter().map(|m| m.parameter_count()).sum()
    }

    /// Writes `<dir>/<variable>.nbeats` for every variable.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, (m, name)) in self.models.iter().zip(&self.variable_names).enumerate() {
            m.to_checkpoint(name, self.seed + i as u64)
                .save(&dir.join(format!("{name}.nbeats")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, variable_names: &[String]) -> Result<Self> {
        let mut models = Vec::with_capacity(variable_names.len());
        let mut seed = 0;
        for (i, name) in variable_names.iter().enumerate() {
            let ckpt = Checkpoint::load(&dir.join(format!("{name}.nbeats")))?;
            if i == 0 {
                seed = ckpt.seed;
            }
            models.push(NBeatsModel::from_checkpoint(&ckpt)?);
        }
        if models.is_empty() {
            return Err(Error::Data("no variables to load".into()));
        }
        Ok(Self {
            variable_names: variable_names.to_vec(),
            models,
            seed,
        })
    }
}

impl Predictor for NBeatsEnsemble {
    fn width(&self) -> usize {
        self.models.len()
    }

    fn lookback(&self) -> usize {
        self.config().lookback
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.models.len() {
            return Err(Error::Shape {
                op: "nbeats_ensemble",
                left: s.to_vec(),
                right: vec![self.models.len(), self.lookback()],
            });
        }
        let (b, d, l, h) = (s[0], s[1], s[2], self.horizon());
        let per_var: Vec<Tensor> = self
            .models
            .par_iter()
            .enumerate()
            .map(|(v, m)| {
                let mut data = Vec::with_capacity(b * l);
                for i in 0..b {
                    data.extend_from_slice(&inputs.data()[(i * d + v) * l..(i * d + v + 1) * l]);
                }
                predict(m, &Tensor::new(vec![b, 1, l], data)?)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; b * d * h];
        for (v, t) in per_var.iter().enumerate() {
            for i in 0..b {
                out[(i * d + v) * h..(i * d + v + 1) * h].copy_from_slice(&t.data()[i * h..(i + 1) * h]);
            }
        }
        Tensor::new(vec![b, d, h], out)
    }
}

/// Trains one model per variable; variable `i` uses seed `seed + i`.
pub fn train_per_variable(
    windows: &WindowBatch,
    variable_names: &[String],
    config: NBeatsConfig,
    training: &TrainingConfig,
    seed: u64,
) -> Result<(NBeatsEnsemble, Vec<TrainReport>)> {
    if windows.width() != variable_names.len() {
        return Err(Error::Data(format!(
            "{} variable names for windows of width {}",
            variable_names.len(),
            windows.width()
        )));
    }
    if windows.lookback() != config.lookback || windows.horizon() != config.horizon {
        return Err(Error::Data(format!(
            "windows are {}x{}, model expects {}x{}",
            windows.lookback(),
            windows.horizon(),
            config.lookback,
            config.horizon
        )));
    }
    let results: Vec<(NBeatsModel, TrainReport)> = (0..variable_names.len())
        .into_par_iter()
        .map(|v| {
            let var_seed = seed + v as u64;
            let mut model = NBeatsModel::build(config, var_seed)?;
            let report = fit(&mut model, &windows.select_variable(v), training, var_seed)
                .map_err(|e| e.context(format!("variable `{}`", variable_names[v])))?;
            Ok((model, report))
        })
        .collect::<Result<_>>()?;
    let (models, reports) = results.into_iter().unzip();
    Ok((
        NBeatsEnsemble {
            variable_names: variable_names.to_vec(),
            models,
            seed,
        },
        reports,
    ))
}
