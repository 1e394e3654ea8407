//! Adam with bias correction, reduce-on-plateau learning-rate schedule and
//! patience-based early stopping.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
        }
    }
}

/// Adam moments plus the plateau bookkeeping for one training job.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub plateau: PlateauConfig,
    bad_epochs: usize,
    best_val: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, plateau: PlateauConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            lr,
            plateau,
            bad_epochs: 0,
            best_val: f64::INFINITY,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second_moment[index]
    }
}

/// One Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(Error::Data(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            store.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for id in store.ids() {
        let g = grads.get(id);
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: store.get(id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = state.lr;

    for id in store.ids().collect::<Vec<_>>() {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = store.data_mut(id);
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Feeds one validation loss to the plateau schedule; halves (by
/// `plateau.factor`) the learning rate after `plateau.patience` consecutive
/// non-improving calls. Returns true when the rate was reduced.
pub fn plateau_schedule(state: &mut OptimizerState, val_loss: f64) -> bool {
    if val_loss < state.best_val {
        state.best_val = val_loss;
        state.bad_epochs = 0;
        return false;
    }
    state.bad_epochs += 1;
    if state.bad_epochs >= state.plateau.patience {
        state.lr *= state.plateau.factor;
        state.bad_epochs = 0;
        return true;
    }
    false
}

/// True iff the best (first minimal) value of `history` lies more than
/// `patience` entries before the end.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, b)) if v >= b => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
    else {
        return false;
    };
    history.len() - 1 - best > patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tape;

    fn scalar_problem(value: f64) -> (ParamStore, crate::numcore::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        (store, id)
    }

    fn grads_of(store: &ParamStore, g: f64) -> Gradients {
        // d/dw (g·w) = g
        let mut tape = Tape::new();
        let w = tape.param(store, crate::numcore::ParamId(0));
        let loss = tape.scale(w, g).unwrap();
        tape.backward(loss, store).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_problem(1.0);
        let mut state = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        { let g = grads_of(&store, 1.0); adam_step(&mut store, &g, &mut state) }.unwrap();
        let moved = 1.0 - store.get(id).item().unwrap();
        // lr·g/(|g|+ε)
        let expected = 0.001 * 1.0 / (1.0 + ADAM_EPS);
        assert!((moved - expected).abs() < 1e-15, "{moved}");
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut store, id) = scalar_problem(0.7);
        let mut state = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        { let g = grads_of(&store, 1.0); adam_step(&mut store, &g, &mut state) }.unwrap();
        let after_one = store.get(id).item().unwrap();
        let m_before = state.first_moment(0).item().unwrap();
        let v_before = state.second_moment(0).item().unwrap();
        // Zero gradient from a fresh state keeps the parameter exactly.
        let mut fresh = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        { let g = grads_of(&store, 0.0); adam_step(&mut store, &g, &mut fresh) }.unwrap();
        assert_eq!(store.get(id).item().unwrap(), after_one);
        // With history, moments decay toward zero.
        { let g = grads_of(&store, 0.0); adam_step(&mut store, &g, &mut state) }.unwrap();
        assert!(state.first_moment(0).item().unwrap().abs() < m_before.abs());
        assert!(state.second_moment(0).item().unwrap() < v_before);
    }

    #[test]
    fn constant_gradient_trajectory_matches_hand_recurrence() {
        // Reference computed with the textbook recurrence written out by hand
        // (python float arithmetic, same operation order).
        let expected = [
            0.99900000002,
            0.99800000004,
            0.99700000006,
            0.99600000008,
            0.9950000001,
        ];
        let (mut store, id) = scalar_problem(1.0);
        let mut state = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        for want in expected {
            { let g = grads_of(&store, 0.5); adam_step(&mut store, &g, &mut state) }.unwrap();
            let got = store.get(id).item().unwrap();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, _) = scalar_problem(1.0);
        let mut state = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        let grads = Gradients {
            grads: vec![Tensor::scalar(f64::NAN)],
        };
        let err = adam_step(&mut store, &grads, &mut state).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn plateau_behaviour() {
        let store = ParamStore::new();
        let mut s = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        for l in [1.0, 0.9, 0.8] {
            plateau_schedule(&mut s, l);
        }
        assert_eq!(s.lr, 0.001);

        let mut s = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        let mut reduced_at = None;
        for (i, l) in [1.0; 6].into_iter().enumerate() {
            if plateau_schedule(&mut s, l) {
                reduced_at.get_or_insert(i);
            }
        }
        assert_eq!(s.lr, 0.0005);
        assert_eq!(reduced_at, Some(5));

        let mut s = OptimizerState::new(&store, 0.001, PlateauConfig::default());
        let mut loss = 10.0;
        for i in 0..200 {
            loss = if i % 2 == 0 { loss - 0.01 } else { loss + 0.005 };
            plateau_schedule(&mut s, loss);
        }
        assert_eq!(s.lr, 0.001);
    }

    #[test]
    fn early_stopping_patience() {
        let mut h = vec![1.0];
        h.extend(std::iter::repeat_n(1.5, 99));
        assert!(!early_stop(&h, 100));
        h.extend([1.5, 1.5]);
        assert!(early_stop(&h, 100));
        let decreasing: Vec<f64> = (0..1000).map(|i| 1000.0 - i as f64).collect();
        assert!(!early_stop(&decreasing, 100));
    }
}
