//! Dense arrays, a reverse-mode tape, and the finite-difference checker used
//! to validate every trainable component.

mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradReport, ParamGradError, REL_ERR_FLOOR};
pub use ops::{attention, avg_pool_rows, log_softmax, masked_attention};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
