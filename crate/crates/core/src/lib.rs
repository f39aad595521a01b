//! Multi-agent human trajectory prediction with a masked agent-timestep
//! Transformer.
//!
//! The crate is `no_std` (with `alloc`) so the model, objective and pose
//! lifting can run wherever a global allocator exists. File formats, the
//! training driver and the command-line tool live in the `hst` crate.
//!
//! Module map:
//! - [`numerics`]: dense `f64` tensors, a reverse-mode tape, layers and Adam.
//! - [`scene`]: prediction windows, masking, resampling, agent capping and
//!   detection-to-label association.
//! - [`pose`]: pinhole camera, 3D keypoint lifting and head orientation.
//! - [`model`]: the network itself.
//! - [`objective`]: mixture likelihood, min-NLL training loss and metrics.
//! - [`synth`]: deterministic social-force scene generator.
//! - [`train`]: per-scene loss/gradient evaluation and optimizer steps.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod math;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pose;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
