//! Two-layer networks with degree-wise attention over spherical-harmonic
//! channels: a one-step channel selection stage followed by gradient descent
//! on the second layer, with the kernel and complexity quantities needed to
//! measure both.

pub mod complexity;
pub mod error;
pub mod harness;
pub mod kernel;
mod par;
pub mod points;
pub mod seed;
pub mod selection;
pub mod sphere;
pub mod stats;
pub mod target;
pub mod trainer;

pub use error::{Error, Result};
pub use par::set_threads;
