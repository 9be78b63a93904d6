//! Core of a continuous variable-rate neural image codec.
//!
//! A single trained model covers a wide bits-per-pixel range: a small
//! convolutional analysis/synthesis pair produces latents, a per-channel
//! monotone CDF network prices them, a range coder serializes them, and a
//! lambda-conditioned modulation network scales latent elements so that one
//! checkpoint can be driven to any rate point. On top of that sits a
//! lambda-domain rate-distortion toolkit: parametric R-lambda / D-lambda
//! models, curve fitting, rate control, and BD-rate comparison.
//!
//! The crate is `no_std` (with `alloc`) and performs all arithmetic in
//! deterministic, fixed evaluation order with soft-float transcendentals, so
//! results are bit-identical across runs and platforms. File formats and the
//! command-line surface live in the companion `modnic` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codec;
pub mod coder;
pub mod density;
pub mod gradcheck;
pub mod kernels;
pub mod math;
pub mod metrics;
pub mod modnet;
pub mod rdmodel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use tensor::Tensor;
