//! Voxel GAN training, latent projection and SNAP refinement.

pub mod bundle;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gan;
pub mod io;
pub mod nets;
pub mod projection;
pub mod reference;
pub mod stats;
pub mod voxel;

pub use error::{Error, FormatError, Result};
