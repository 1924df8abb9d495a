//! Text-guided multi-stage cross-perception segmentation at desk scale.

pub mod check;
pub mod cross;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod seg;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
