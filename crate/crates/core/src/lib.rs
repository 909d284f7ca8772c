//! Concept-supervised convolutional VAE.
//!
//! The crate is split along the pipeline:
//!
//! * [`dataset`]: MNIST IDX ingestion, labeled datasets and seeded splits.
//! * [`conceptgen`]: the 18 visual concepts, rectangle sampling and the
//!   augmented training set.
//! * [`model`]: the fully-convolutional VAE (encoder, reparameterization,
//!   decoder with exposed intermediate maps) and its checkpoint format.
//! * [`training`]: reconstruction / KL / concept losses, Adam, the epoch loop.
//! * [`analysis`]: k-means, decoded cluster centers, alignment scoring and
//!   PNG grids.

pub mod analysis;
pub mod conceptgen;
pub mod dataset;
mod error;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
