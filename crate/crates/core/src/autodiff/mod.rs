//! Dense arrays with tape-based reverse-mode differentiation.

mod array;
pub mod fault;
mod gemm;
pub mod gradcheck;
mod nn;
mod ops;
mod tape;

pub use array::Array;
pub use gemm::{default_precision, set_default_precision, Precision};
pub use gradcheck::{check_graph, finite_diff_check, relative_error, GradCheck, FD_STEP};
pub use nn::{same_padding, BnRunning, BnStats, BN_EPS, BN_MOMENTUM};
pub use ops::{concat, stack, L2_EPS};
pub use tape::{Gradients, Tape, Var};
