//! Rectified-flow inversion and mask-guided portrait editing on a desk-scale stack.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`gradcheck`], [`rng`]: numeric core.
//! - [`flow`]: time grids, Euler and second-order solver steps, inversion and
//!   denoising loops, and a trainable 2-D rectified-flow demo.
//! - [`dit`]: a frozen toy diffusion transformer with value recording and
//!   injection hooks in its tail blocks.
//! - [`pasl`]: the text-to-mask locator (conv encoder, frozen text stub,
//!   projector), its losses, training loop and complexity accounting.
//! - [`synth`]: procedural portraits with exact region masks and attributes.
//! - [`edit`]: the structure-to-detail edit controller and ablation sweeps.
//! - [`metrics`]: attribute accuracies, PSNR, SSIM, mask IoU, attribute oracle.

pub mod autodiff;
pub mod checkpoint;
pub mod dit;
pub mod edit;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pasl;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};

/// Version string embedded in every report.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
