//! Core library for a federated one-shot segmentation sandbox.
//!
//! Everything here is deterministic given the seeds passed in: tensor math,
//! superpixel pseudo-labels, episode construction, the prototype segmentation
//! head, its losses, phantom data generation, federated averaging, and the
//! episodic evaluation protocol.

pub mod datastore;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod fedsim;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod protoseg;
pub mod rng;
pub mod superpixel;
pub mod tensor;

pub use error::{Error, ParseError, Result};
