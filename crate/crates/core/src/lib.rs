//! Joint depth and all-in-focus estimation from focal stacks.
//!
//! A focal stack is a set of registered images of one scene taken at
//! different focus positions. A single 3D-convolutional network turns the
//! stack into a per-pixel, per-slice attention volume; a softplus-normalized
//! readout of that volume yields an expected depth map, while a
//! softmax-normalized readout blends the stack into an all-in-focus image.
//! Because the depth readout has no parameters of its own, the network can
//! be trained either against ground-truth depth or purely against
//! all-in-focus images.
//!
//! The crate also ships a layered circle-of-confusion defocus simulator for
//! synthesizing training stacks, the loss and metric suite, a classical
//! sharpness-argmax baseline, and file formats plus a CLI tying it together.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
