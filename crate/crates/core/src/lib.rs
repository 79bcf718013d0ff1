//! Two-stage generative pipeline for implicit neural assets.
//!
//! Stage 1 learns discrete tri-plane latents for objects observed in single
//! images with occlusions: a 2D-to-3D cross-attention encoder, a vector
//! quantization codebook, and a 3D-to-2D decoder (token transformer,
//! style-based tri-plane generator and neural volume renderer), trained with
//! masked reconstruction, perceptual, adversarial, VQ and occlusion-aware
//! alpha losses. Stage 2 fits a bidirectional masked-token transformer over
//! the flattened latent sequences and samples new assets by iterative
//! confidence decoding, with optional discrete/continuous/image conditioning.
//!
//! The crate also ships a deterministic synthetic dataset generator with
//! oracle masks and depth, marching-cubes mesh extraction, OBJ/PLY export,
//! and the full evaluation suite (FID, mask/mesh floater-over-union,
//! coverage/MMD for images and geometry, depth consistency).

pub mod camera;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod pyramid;
pub mod renderer;
pub mod sample;
pub mod stage1;
pub mod stage2;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
