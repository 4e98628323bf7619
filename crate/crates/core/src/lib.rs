//! Joint architecture search for real-time semantic segmentation.
//!
//! The search space stacks three hyper-cells (a reduction cell followed by
//! normal cells whose output edges encode depth) and an aggregation cell that
//! fuses the three hyper-cell outputs. Operation choice, depth and fusion are
//! relaxed with Gumbel-Softmax and optimized jointly with the network weights
//! under a latency-aware objective.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod latency;
pub mod sampling;
pub mod space;
pub mod tensor;

pub use config::SearchConfig;
pub use error::{Error, Result};
pub use tensor::{Gradients, ParamGroup, ParamId, ParamStore, Shape4, Tape, Tensor4, Var};
