//! Shadow removal with an inpainting-pretrained adaptive fusion network.
//!
//! The pipeline pretrains a generator on image inpainting (masked ℓ1, GAN,
//! perceptual and style losses), then fine-tunes it for shadow removal with
//! masked ℓ1 alone. The fusion network encodes the shadow-masked image and the
//! shadow image separately and blends the two feature maps with learned
//! per-element weights. Evaluation reports LAB error, PSNR and SSIM over the
//! shadow, non-shadow and whole-image regions.
//!
//! Everything is plain `f64` on the CPU and deterministic for a given seed.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod training;
