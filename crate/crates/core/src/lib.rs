//! Coarse-to-fine panoramic detection and hierarchical activity recognition
//! at desk scale.

pub mod evaluation;
pub mod featurizer;
pub mod focuser;
pub mod geometry;
pub mod io;
pub mod prototyper;
pub mod recognition;
pub mod render;
