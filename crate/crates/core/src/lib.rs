pub mod dataset;
pub mod error;
pub mod exec;
pub mod extraction;
pub mod harness;
pub mod marker;
pub mod model;
pub mod nn;
pub(crate) mod serde_inf;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
