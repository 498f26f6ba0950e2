//! Conditional flow-matching synthesis and evaluation for multichannel
//! biosignal windows.
//!
//! The crate covers the full loop: window preprocessing, a velocity-field
//! generator trained with conditional flow matching, explicit ODE sampling
//! with classifier-free guidance, and an evaluation suite (FID, IS, CAS,
//! PRDC, realism diagnostics, TSTR/augmentation protocols).

pub mod classifier;
pub mod data;
pub mod error;
pub mod guide;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
