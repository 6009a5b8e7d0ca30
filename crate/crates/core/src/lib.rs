//! Parameter-efficient tuning of a small history-aware navigation transformer.

// `!(x > 0.0)` is used on purpose so that NaN fails config checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod boosters;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod petl;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use params::{ParamId, ParamRegistry, Role};
pub use model::{MethodConfig, Model, ModelConfig};
pub use petl::Method;
