//! Reverse-mode autodiff on a per-step tape, plus the numeric kernels,
//! parameter storage, optimizer, and gradient-checking harness built on it.

pub mod adam;
pub mod gradcheck;
pub mod grid;
pub mod kernels;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use grid::HashGrid;
pub use kernels::{conv_out, ImageShape};
pub use mlp::Mlp;
pub use params::{Group, ParamId, ParamStore};
pub use tape::{corner_setup, Gradients, GridMeta, LevelMeta, NodeId, RayPack, Tape};
pub use tensor::{sc, Scalar, Tensor};
