//! Curvature-aware restoration of a fine-tuned adapter toward its base
//! behavior on a forget set, with loss-landscape diagnostics.

pub mod analysis;
pub mod curvature;
pub mod data;
pub mod error;
pub mod influence;
pub mod landscape;
pub mod math;
pub mod model;
pub mod persist;
pub mod pipeline;
pub mod scenario;
pub mod surrogate;

pub use error::{Error, Result};
pub use math::{ParamVec, RngState};
pub use model::{init_model, Batch, MicroModel, ModelSpec, Objective};
