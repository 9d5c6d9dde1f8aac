//! Geometric and numerical core for voice-to-3D-face experiments.
//!
//! - [`model`]: linear morphable face model, synthesis, pose, normals
//! - [`fitting`]: landmark annotations and ridge least-squares coefficient fitting
//! - [`registration`]: kd-tree nearest neighbors and point-to-plane ICP
//! - [`metrics`]: absolute ratio error, landmark NME, holistic and part RMSE
//! - [`distill`]: cosine-kernel neighbor-probability distillation loss with gradients
//! - [`regressor`]: linear coefficient decoders trained with Adam
//! - [`audio`]: log-mel front end, per-bin normalization, random cropping
//! - [`synthetic`]: seeded models, annotations and paired datasets
//! - [`faceio`]: file formats

pub mod audio;
pub mod distill;
pub mod error;
pub mod faceio;
pub mod fitting;
pub mod metrics;
pub mod model;
pub mod registration;
pub mod regressor;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
