//! Shift-robust ultrasound segmentation with anti-aliased downsampling.

pub mod autodiff;
pub mod cli;
pub mod data;
mod error;
pub mod ops;
pub mod phantom;
pub mod rng;
pub mod shift_eval;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
