//! Spiral-sampling multispectral photoacoustic tomography: acquisition
//! simulation, structural-prior fusion, self-supervised coordinate-network
//! reconstruction, spectral unmixing and image-quality metrics.

pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod physics;
pub mod prior;
pub mod unmix;

pub use error::{Error, Result};
