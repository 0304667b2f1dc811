//! Conformalized amortized posterior approximators.
//!
//! Wraps any conditional density `q(theta | x)` in split conformal
//! prediction with the score `1 / q(theta | x)`, estimates the expected size of
//! the resulting regions, and selects among candidate approximators by that
//! size before recalibrating on fresh data.

pub mod conformal;
pub mod dataset;
pub mod efficiency;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod stats;
pub mod tasks;

pub use dataset::{DatasetRole, JointDataset, JointSample};
pub use error::{CanviError, Result};
pub use stats::{ExtendedScore, RngStream};
pub use tasks::{Task, TaskName};
