//! Flow-based unpaired image-to-image translation with deformation-guided
//! temporal consistency between neighboring slices.

pub mod check;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
