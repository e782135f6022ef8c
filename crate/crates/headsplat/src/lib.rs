//! One-shot 3D Gaussian head avatars with a decoupled reconstruction / drive path.
//!
//! The pipeline reconstructs a controllable Gaussian head from a single portrait
//! image, then reenacts it frame by frame through an ultra-light drive module.
//! Reconstruction (feature backbone, canonicalization, Gaussian generation) runs
//! once per avatar; the per-frame loop only maps a control vector to dynamic
//! Gaussian positions, splats, and refines — so drive latency is independent of
//! how large the reconstruction backbone is.
//!
//! Crate layout mirrors the pipeline stages:
//!
//! - [`gauss`], [`camera`], [`img`], [`mesh`]: shared value types.
//! - [`render`]: differentiable projection + alpha-composited rasterization.
//! - [`tape`] / [`kernels`]: reverse-mode autodiff and the shared math kernels.
//! - [`backbone`], [`canon`], [`generator`], [`reenact`], [`restore`]: the
//!   network blocks, tied together by [`model`].
//! - [`synth`]: the procedural face world that supplies images, exact control
//!   vectors, landmarks, and cameras.
//! - [`train`]: two-stage optimization (global pretrain, restorer finetune).
//! - [`metrics`], [`bench`]: evaluation protocols and the latency benchmark.
//! - [`cli`]: the `headsplat` command surface.

pub mod backbone;
pub mod bench;
pub mod camera;
pub mod canon;
pub mod cli;
pub mod config;
pub mod error;
pub mod gauss;
pub mod generator;
pub mod gradcheck;
pub mod img;
pub mod kernels;
pub mod lpips;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod reenact;
pub mod render;
pub mod restore;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
