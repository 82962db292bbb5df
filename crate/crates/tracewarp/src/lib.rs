//! Deformable image translation with traceable spatial correspondence.
//!
//! A single encoder feeds two decoders: one synthesizes the translated
//! image, the other predicts a stationary velocity field whose integration
//! yields a diffeomorphic deformation of the source. Training is adversarial
//! (least-squares patch discriminators on both streams) with a mutual-
//! information constraint tying the two outputs together structurally, so
//! every output pixel keeps an explicit spatial origin in the input.
//!
//! The crate is organized around small, testable layers:
//!
//! - [`autodiff`] — reverse-mode AD over dense tensors (f32 for training,
//!   f64 for gradient checking)
//! - [`deformation`] — velocity integration by scaling and squaring,
//!   bilinear warping, fold diagnostics
//! - [`losses`] — differentiable normalized mutual information, content
//!   alignment, least-squares adversarial objectives
//! - [`model`] — the dual-decoder generator and the patch discriminators
//! - [`data`] — synthetic paired datasets with known ground-truth fields
//! - [`trainer`] — Adam and the alternating generator/discriminator loop
//! - [`eval`] — image-quality metrics and the correspondence/traceability
//!   protocols
//! - [`cli`] — the `tracewarp` command-line surface
//!
//! Runnable walkthroughs for each capability live under `examples/`.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod deformation;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
