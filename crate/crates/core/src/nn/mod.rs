//! Differentiable tensor primitives: the tape, parameter storage and gradient checks.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, Objective, TensorCheck, REL_ERR_FLOOR};
pub use params::{load_named, ParamEntry, ParamId, ParamKind, ParamStore, WarmstartReport};
pub use tape::{ConvSpec, Gradients, Mode, RunningUpdate, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor4;
