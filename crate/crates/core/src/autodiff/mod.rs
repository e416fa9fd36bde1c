//! Dense tensors and reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use crate::error::TensorError;
pub use gradcheck::{check_params, finite_diff_check, CheckOptions, CheckReport};
pub use params::{Param, ParamGrads, ParamId, ParamSet};
pub use tape::{BnState, PairIndex, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
