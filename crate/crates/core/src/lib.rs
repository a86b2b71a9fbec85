//! Joint image reconstruction and indirect diffeomorphic registration.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`jrrt`] and [`diff`]: dense arrays, the on-disk tensor
//!   format and reverse-mode differentiation.
//! * [`operators`]: matched forward/adjoint pairs for masked Fourier MRI and
//!   parallel-beam CT, sampling masks and noise.
//! * [`inversion`]: the data-consistency block solved by conjugate gradient
//!   with its closed-form backward rule, and TV reconstruction.
//! * [`lddmm`]: smoothing kernels, warping, stationary-velocity exponentials,
//!   geodesic shooting and classical registration.
//! * [`regnets`]: the momentum-prediction and shooting-warping networks.
//! * [`pipeline`]: the unrolled Douglas-Rachford network, its loss, training
//!   and inference.
//! * [`phantoms`], [`eval`], [`config`] and [`cli`]: synthetic data, metrics,
//!   run configuration and the command-line driver.

pub mod cli;
pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod fft;
pub mod inversion;
pub mod jrrt;
pub mod lddmm;
pub mod operators;
pub mod phantoms;
pub mod pipeline;
pub mod regnets;
pub mod tensor;

pub use diff::{CustomGradOp, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
