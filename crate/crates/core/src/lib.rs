//! Photometric stereo from observation maps.
//!
//! Unordered (image, light) observations of each pixel are scattered onto a fixed
//! `w x w` grid and a small convolutional network regresses the surface normal. The crate
//! also carries the synthetic renderer used to make training data, a Lambertian
//! least-squares baseline and the evaluation metrics.

pub mod baseline;
pub mod error;
pub mod imageio;
pub mod layout;
pub mod metric;
pub mod micronet;
pub mod obsmap;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use types::{Grid, ImageStack, LightSet, Mask, NormalMap, Vec3};
