//! MIND-feature symmetric diffeomorphic B-spline registration.

pub mod bspline;
pub mod deformation;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mind;
pub mod objective;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
