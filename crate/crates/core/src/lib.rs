//! Multi-task vision models behind a single language interface.
//!
//! Every task is phrased as parallel token sequences decoded by one
//! transformer over a shared image observation.

pub mod assign;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod decode;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod model;
pub mod params;
pub mod scalar;
pub mod task;
pub mod template;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Result, UliError};
pub use scalar::Scalar;
pub use task::{Profile, StepSlice, TaskKind, TaskSpec};
pub use tensor::Matrix;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
