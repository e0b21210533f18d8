//! Desk-scale pose-free multi-view novel view synthesis.
//!
//! The crate trains a dual-stream denoising diffusion model that jointly
//! generates novel-view images and per-pixel Plücker ray pose maps, against
//! a procedural raycast scene oracle. Subsystems:
//!
//! - [`tensor`]: f64 tensors, reverse-mode autodiff, Adam.
//! - [`camera`]: camera conventions, Plücker embeddings, pose recovery.
//! - [`scene`]: procedural scenes, raycast rendering, point-map oracle.
//! - [`bundle`]: image-pose bundle assembly and masking.
//! - [`model`]: the dual-stream U-Net and alignment adapter.
//! - [`diffusion`]: schedule, losses, training loop, ancestral sampling.
//! - [`evalsuite`]: PSNR/SSIM, pose-error evaluation, sweeps, ablations.
//! - [`nvcb`]: the shared binary tensor container.

pub mod bundle;
pub mod camera;
pub mod diffusion;
pub mod nvcb;
pub mod scene;
pub mod error;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
