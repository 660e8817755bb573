//! Feature-enhanced Gaussian splat scenes for part-level manipulation:
//! depth-initialized scene fitting with multi-channel splatting,
//! hierarchical object/part reference features, embedding-based object and
//! part queries, antipodal grasp sampling directly on primitives, and
//! real-time rigid scene editing driven by tracked keypoints.

pub mod error;
pub mod feature;
pub mod fit;
pub mod img;
pub mod query;
pub mod render;
pub mod scene;
pub mod spatial;

pub use error::{Error, Result};

/// Dimensionality of the per-primitive view-independent latent.
pub const LATENT_DIM: usize = 16;
