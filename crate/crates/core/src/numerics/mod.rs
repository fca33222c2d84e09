//! Dense `f64` arrays, a reverse-mode tape, and SGD with momentum.

mod array;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::{
    layer_norm, log_softmax, matmul, soft_cross_entropy, softmax, softmax_slice, Array,
    DENOM_FLOOR, LN_EPS,
};
pub use gradcheck::{
    finite_difference_check, relative_error, Differentiable, GradCheckReport, ParamError,
};
pub use optim::{sgd_step, OptimizerState};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tape::{check_target_rows, sigmoid, Gradients, NodeId, Tape};
