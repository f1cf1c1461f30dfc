//! Stacked intelligent metasurface simulator and interlayer calibration engine.
//!
//! The pipeline is: [`geometry`] builds and deforms the layer stack,
//! [`propagation`] turns geometry into complex transfer matrices,
//! [`measurement`] simulates pilot observations of the hidden practical system,
//! [`calibration`] recovers the matrices from those observations, and
//! [`reporting`] turns runs into tables and heatmaps. [`scenario`] holds the
//! JSON run description shared by the CLI and the tests.

pub mod calibration;
pub mod error;
pub mod geometry;
pub mod matrix;
pub mod measurement;
pub mod propagation;
pub mod reporting;
pub mod scenario;
pub mod selfcheck;
pub mod seeds;

pub use error::{Result, SimError};
pub use matrix::{ComplexMatrix, C64};
