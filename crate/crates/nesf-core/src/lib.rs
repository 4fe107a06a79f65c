//! Neural segmentation fields over synthetic voxel scenes.
//!
//! The library trains a density field with latent segmentation heads from
//! posed grayscale views, supervised only by depth and a self-labeling loop
//! (entropic optimal transport between 2D and 3D feature banks). Trained
//! fields support segmentation-driven camera relocalization and are evaluated
//! against feature-inversion attacks that try to reconstruct the training
//! images from rendered internal features.
//!
//! Module map:
//! - [`geometry`]: SE(3) poses, pinhole cameras, ray generation.
//! - [`diffcore`]: reverse-mode autodiff tape, hash-grid encoding, Adam.
//! - [`fields`]: density/segmentation/feature field and volume rendering.
//! - [`encoder2d`]: convolutional image encoder with segmentation heads.
//! - [`labeling`]: Sinkhorn self-labeling and prototype banks.
//! - [`losses`]: training losses (contrastive, joint CE, hierarchy, depth).
//! - [`training`]: the end-to-end optimization loop and checkpoints.
//! - [`localization`]: histogram retrieval and gradient pose refinement.
//! - [`privacy`]: inversion decoder, attack protocol, image metrics.
//! - [`scenes`]: synthetic voxel scenes, oracle renderer, view sets.
//! - [`io`]: binary/JSON file formats shared by the CLI and tests.

pub mod diffcore;
pub mod encoder2d;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod localization;
pub mod losses;
pub mod privacy;
pub mod rng;
pub mod scenes;
pub mod training;

pub use error::{Error, Result};
