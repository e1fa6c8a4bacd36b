//! Deformable 3D registration where an untrained multi-level convolutional
//! network parameterizes a stationary velocity field, fitted per image pair.

pub mod autodiff;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod par;
pub mod phantom;

pub use error::{Error, Result};
