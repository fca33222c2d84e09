use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};

/// SGD with heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: Vec<Array>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!("momentum {momentum} not in [0,1)")));
        }
        if !(learning_rate >= 0.0) {
            return Err(Error::contract(format!(
                "learning rate {learning_rate} must be nonnegative"
            )));
        }
        Ok(OptimizerState {
            momentum_buffers: store.iter().map(|p| Array::zeros(p.value.shape())).collect(),
            learning_rate,
            momentum,
        })
    }
}

/// `buf ← μ·buf + g; value ← value − lr·buf`, then zeroes the gradients.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState) {
    debug_assert_eq!(store.len(), state.momentum_buffers.len());
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (p, buf) in store.iter_mut().zip(&mut state.momentum_buffers) {
        for ((v, g), b) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data_mut())
            .zip(buf.data_mut())
        {
            *b = mu * *b + *g;
            *v -= lr * *b;
            *g = 0.0;
        }
    }
}
