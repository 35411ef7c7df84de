//! Latent diffusion for ultrasound phantoms.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`numerics`]: tensors, reverse-mode autodiff, Adam, gradient checks
//! * [`diffusion`]: noise schedules, forward process, DDPM/DDIM samplers
//! * [`codec`]: the VAE mapping 64×64 images to 4×8×8 latents
//! * [`denoiser`]: class-conditional U-Net ε-predictor
//! * [`control`]: zero-convolution mask branch grafted onto a frozen U-Net
//! * [`data`]: procedural phantoms and BUSI-layout ingestion
//! * [`trainer`] and [`checkpoint`]: staged training with exact resume
//! * [`evaluator`]: classifier AUC experiments and mask adherence
//! * [`generate`] and [`service`]: the shared generation path and HTTP API

pub mod checkpoint;
pub mod codec;
pub mod control;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod generate;
pub mod imaging;
pub mod layers;
pub mod numerics;
pub mod service;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
