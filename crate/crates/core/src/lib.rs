//! Deterministic simulator and analytical cost model for tensor-parallel
//! training of low-rank bottleneck transformer blocks.
//!
//! The crate executes real sharded math on simulated ranks, records every
//! collective, and checks both against a single-device oracle and against
//! closed-form volume and arithmetic-intensity models.

pub mod ckpt;
pub mod comm;
pub mod cost;
pub mod error;
pub mod model;
pub mod norm;
pub mod plan;
pub mod sim;
pub mod tensor;

pub use comm::{trace_volume, CollectiveKind, CollectiveRecord, Comm, Pass, Tag, Trace, Volume};
pub use error::{Error, Result};
pub use model::{ModelConfig, Proj, RunShape, Variant};
pub use plan::{plan, PlanOptions, ShardPlan, Strategy};
pub use tensor::Tensor;
