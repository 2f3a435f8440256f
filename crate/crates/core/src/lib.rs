//! Diffusion posterior sampling for accelerated single-coil MRI.
//!
//! The crate covers the whole desk-scale pipeline: synthetic class-labelled
//! phantoms, the undersampled Fourier measurement model, self-supervised
//! denoising of the training set, a class-conditioned U-Net denoiser trained
//! with the EDM objective, the posterior sampler with sample averaging, an
//! L1-wavelet baseline and the experiment harness.

pub mod baseline;
pub mod denoise;
pub mod error;
pub mod harness;
pub mod io;
pub mod operators;
pub mod phantoms;
pub mod rng;
pub mod sampler;
pub mod scorenet;

pub use error::{Error, Result};
pub use phantoms::{ClassLabel, Image, ImageSample, Split};
