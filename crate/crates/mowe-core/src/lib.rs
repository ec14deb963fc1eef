//! Mixture-of-weak-encoders audio language model, desk scale.
//!
//! A frozen-looking large audio encoder is replaced by one small trainable
//! base encoder plus a pool of even smaller "weak" encoders, selected
//! per input by top-1 routers and fused into the embedding stream of a
//! tiny decoder. Everything runs on CPU with an in-crate autodiff tape;
//! there is no external ML framework underneath.

pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod routing;
pub mod synthdata;
pub mod trainer;

pub use error::{MoweError, Result};
