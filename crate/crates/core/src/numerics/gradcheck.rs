//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamStore, Tape};

/// Anything with parameters and a scalar objective built on a [`Tape`].
pub trait Differentiable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// False when the objective draws randomness (e.g. active dropout).
    fn is_deterministic(&self) -> bool;
    fn loss(&self, tape: &mut Tape) -> Result<NodeId>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Relative error with the denominator floored so that gradients that are
/// zero on both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of every parameter element against
/// `(f(θ+h) − f(θ−h)) / 2h`.
pub fn finite_difference_check<M: Differentiable>(
    model: &mut M,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !model.is_deterministic() {
        return Err(Error::contract(
            "finite-difference check needs a deterministic objective (disable dropout)",
        ));
    }
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape)?;
    let analytic = tape.gradients(loss)?;

    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::new();
        let l = m.loss(&mut t)?;
        Ok(t.value(l).item())
    };

    let ids: Vec<_> = model.params().ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().value(id).len();
        let zeros = vec![0.0; n];
        let grad = analytic.get(id).map_or(&zeros[..], |g| g.data());
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        for k in 0..n {
            let orig = model.params().value(id).data()[k];
            model.params_mut().get_mut(id).value.data_mut()[k] = orig + step;
            let plus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[k] = orig - step;
            let minus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[k], numeric);
            max_err = max_err.max(err);
            sum_err += err;
        }
        entries.push(ParamError {
            name: model.params().get(id).name.clone(),
            max_rel_error: max_err,
            mean_rel_error: sum_err / n as f64,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
