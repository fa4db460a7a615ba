//! Neural-network training with hidden classification layers: auxiliary
//! linear heads on hidden layers trained under a composite loss, plus the
//! GDV class-separability measure for profiling layer representations.

pub mod data;
pub mod error;
pub mod gdv;
pub mod hcl;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::{RngStream, StreamId};
pub use tensor::{Element, Tensor};
