//! Support-guided prompting segmentation.
//!
//! A desk-scale, end-to-end-trainable segmentation stack: a LoRA-adapted
//! patch encoder, support-set-conditioned pseudo-mask generation, a
//! pseudo-mask-gated attention stage with bounding-box prompting, and a
//! bounded slice-memory bank for volumetric propagation. Everything runs
//! on a from-scratch f32 tensor core with tape-based reverse-mode
//! differentiation, verified against central finite differences.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod sgt;
pub mod nn;
pub mod model;
pub mod pmg;
pub mod pma;
pub mod mem3d;
pub mod data;
pub mod train;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod ablate;

pub use error::{Error, Result};
