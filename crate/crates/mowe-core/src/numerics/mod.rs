//! Tensors, seeded randomness, and reverse-mode autodiff.

pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{builtin_op_checks, check_gradients, max_rel_err, weighted_sum, GradReport, OpCheck};
pub use params::{ParamEntry, ParamStore, Session};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
