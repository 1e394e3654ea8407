//! Central-difference verification of tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Parameter entries compared.
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar built by `loss` against
/// central differences with step `h`, for every entry of every parameter.
pub fn check_gradients<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, s)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NotScalar(tape.shape(out).to_vec()))
    };
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out, store)?;

    let mut report = GradCheckReport {
        entries: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let base = store.get(id).clone();
        for i in 0..base.len() {
            let mut shifted = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[i] += delta;
                probe.set(id, Tensor::new(base.shape().to_vec(), data)?)?;
                eval(&probe)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let err = relative_error(grads.get(id).data()[i], numeric);
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
        probe.set(id, base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let report = check_gradients(&store, FD_STEP, |tape, s| {
            let x = tape.param(s, w);
            let sq = tape.mul(x, x)?;
            let cube = tape.mul(sq, x)?;
            tape.sum(cube)
        })
        .unwrap();
        assert_eq!(report.entries, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has a one-sided derivative: the central
        // difference sees 0.5, the tape 0.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![0.0]));
        let report = check_gradients(&store, FD_STEP, |tape, s| {
            let x = tape.param(s, w);
            let r = tape.relu(x)?;
            tape.sum(r)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
