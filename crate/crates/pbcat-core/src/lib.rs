//! Patch-based composite adversarial training for object detectors.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every algorithmic
//! piece: per-box patch placement, gradient-guided sub-patch masking, the
//! persistent global/patch perturbation fields, a small differentiable
//! detector, the replaying ("free") adversarial training loop, the masked
//! PGD patch attack and AP50 evaluation.
//!
//! File formats, dataset generation and the command line live in the `pbcat`
//! crate. Enable the `std` feature for runtime SIMD detection in the matrix
//! kernels.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod attacks;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod masking;
pub mod optim;
pub mod perturb;
pub mod placement;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use config::{ScoreNorm, SelectionMode, TrainConfig};

pub use error::{Error, Result};
pub use tensor::{Image, Mask, PixelRect};
pub use types::{BBox, Detection, ImageSample};
pub use detector::{Detector, PassCounts, ToyArch, ToyDetector};
