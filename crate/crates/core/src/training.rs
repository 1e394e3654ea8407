//! Mini-batch training loop shared by both forecasters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{validation_sample, WindowBatch};
use crate::error::{Error, Result};
use crate::numcore::{
    adam_step, early_stop, plateau_schedule, OptimizerState, ParamStore, PlateauConfig, Tape,
    Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr: f64,
    pub plateau: PlateauConfig,
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            patience: 100,
            batch: 32,
            lr: 0.001,
            plateau: PlateauConfig::default(),
            validation_fraction: 0.10,
        }
    }
}

/// A model trainable by [`fit`]: maps `[B, D, L]` inputs to `[B, D, H]`
/// forecasts on a tape.
pub trait Forecaster {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var>;

    /// Called before every epoch and once more after the best parameters
    /// are restored.
    fn on_epoch_start(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Inference surface used by the detector.
pub trait Predictor {
    fn width(&self) -> usize;
    fn lookback(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Forecasts `[B, D, H]` for inputs `[B, D, L]`.
    fn predict(&self, inputs: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub val_history: Vec<f64>,
    pub final_lr: f64,
}

/// Trains `model` on `windows` with Adam, the plateau schedule and early
/// stopping on a held-out validation sample, then restores the parameters
/// of the best validation epoch.
///
/// When the validation fraction rounds to zero windows the training
/// windows double as the validation set.
pub fn fit<M: Forecaster>(
    model: &mut M,
    windows: &WindowBatch,
    config: &TrainingConfig,
    seed: u64,
) -> Result<TrainReport> {
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if config.batch == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let (train, val) = validation_sample(windows, config.validation_fraction, seed);
    let val = if val.is_empty() { train.clone() } else { val };

    let mut opt = OptimizerState::new(model.params(), config.lr, config.plateau);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..config.epochs {
        model.on_epoch_start()?;
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(config.batch).enumerate() {
            let sub = train.subset(chunk);
            train_step(model, &sub, &mut opt)
                .map_err(|e| e.context(format!("epoch {epoch}, batch {bi}")))?;
        }
        let val_loss = evaluate_loss(model, &val)?;
        plateau_schedule(&mut opt, val_loss);
        history.push(val_loss);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params().clone()));
        }
        if early_stop(&history, config.patience) {
            break;
        }
    }

    let (best_epoch, best_val_loss) = match best {
        Some((e, l, params)) => {
            *model.params_mut() = params;
            (e, l)
        }
        None => (0, f64::NAN),
    };
    model.on_epoch_start()?;
    Ok(TrainReport {
        epochs_run: history.len(),
        best_epoch,
        best_val_loss,
        val_history: history,
        final_lr: opt.lr,
    })
}

fn train_step<M: Forecaster>(model: &mut M, batch: &WindowBatch, opt: &mut OptimizerState) -> Result<()> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let y = tape.constant(batch.targets.clone());
    let pred = model.forward(&mut tape, x)?;
    let loss = tape.mse(pred, y)?;
    let grads = tape.backward(loss, model.params())?;
    adam_step(model.params_mut(), &grads, opt)
}

const EVAL_CHUNK: usize = 256;

/// Windowed MSE: squared error summed over variables and leads, averaged
/// over windows.
pub fn evaluate_loss<M: Forecaster>(model: &M, windows: &WindowBatch) -> Result<f64> {
    let pred = predict(model, &windows.inputs)?;
    crate::detector::mse_loss(&pred, &windows.targets)
}

/// Forecasts `[B, D, H]` for inputs `[B, D, L]`, evaluated in chunks.
pub fn predict<M: Forecaster>(model: &M, inputs: &Tensor) -> Result<Tensor> {
    let b = inputs.shape()[0];
    let mut shape = None;
    let mut data = Vec::new();
    let mut start = 0;
    while start < b {
        let end = (start + EVAL_CHUNK).min(b);
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let x = tape.constant(inputs.gather_rows(&idx));
        let y = model.forward(&mut tape, x)?;
        shape.get_or_insert_with(|| tape.shape(y).to_vec());
        data.extend_from_slice(tape.value(y).data());
        start = end;
    }
    let mut shape = shape.unwrap_or_else(|| vec![0]);
    shape[0] = b;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::windowize_values;

    /// `ŷ = x·w + c` on a one-variable series; the best fit is exact.
    struct Linear {
        store: ParamStore,
        epoch_starts: usize,
    }

    impl Forecaster for Linear {
        fn params(&self) -> &ParamStore {
            &self.store
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
            let w = tape.param(&self.store, self.store.find("w").unwrap());
            let c = tape.param(&self.store, self.store.find("c").unwrap());
            let y = tape.matmul(inputs, w)?;
            tape.add_bcast(y, c)
        }
        fn on_epoch_start(&mut self) -> Result<()> {
            self.epoch_starts += 1;
            Ok(())
        }
    }

    fn linear() -> Linear {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 1]));
        store.add("c", Tensor::zeros(&[1]));
        Linear {
            store,
            epoch_starts: 0,
        }
    }

    fn ramp_windows() -> WindowBatch {
        let values: Vec<f64> = (0..60).map(|i| 0.01 * i as f64).collect();
        windowize_values(&values, 1, 2, 1).unwrap()
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let w = ramp_windows();
        let config = TrainingConfig {
            epochs: 200,
            lr: 0.01,
            ..TrainingConfig::default()
        };
        let mut a = linear();
        let before = evaluate_loss(&a, &w).unwrap();
        let ra = fit(&mut a, &w, &config, 3).unwrap();
        let after = evaluate_loss(&a, &w).unwrap();
        assert!(after < before * 1e-2, "{before} -> {after}");
        assert_eq!(a.epoch_starts, ra.epochs_run + 1);

        let mut b = linear();
        let rb = fit(&mut b, &w, &config, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store.get(a.store.find("w").unwrap()), b.store.get(b.store.find("w").unwrap()));
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let w = ramp_windows();
        let config = TrainingConfig {
            epochs: 30,
            lr: 0.05,
            ..TrainingConfig::default()
        };
        let mut m = linear();
        let report = fit(&mut m, &w, &config, 9).unwrap();
        let (_, val) = validation_sample(&w, config.validation_fraction, 9);
        let restored = evaluate_loss(&m, &val).unwrap();
        assert_eq!(restored, report.best_val_loss);
        let min = report.val_history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, min);
    }

    #[test]
    fn early_stopping_bounds_epochs() {
        // Constant target already fitted by zero weights: nothing improves.
        let values = vec![0.0; 30];
        let w = windowize_values(&values, 1, 2, 1).unwrap();
        let config = TrainingConfig {
            patience: 3,
            ..TrainingConfig::default()
        };
        let report = fit(&mut linear(), &w, &config, 1).unwrap();
        assert_eq!(report.epochs_run, 5);
    }
}
