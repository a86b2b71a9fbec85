//! Diffeomorphic registration: Gaussian smoothing, bilinear warping,
//! stationary-velocity exponentials, EPDiff geodesic shooting and
//! shooting-based registration.
//!
//! Vector fields are `[2, H, W]` tensors. Channel 0 is the column (x)
//! component and channel 1 the row (y) component. Deformations are stored
//! as absolute sampling coordinates, so the identity map holds `(j, i)` at
//! pixel `(i, j)`.

mod dataset;
mod kernel;
mod register;
mod shoot;
mod warp;

pub use dataset::{read_pair, write_pair, MomentumManifest, MomentumPair};
pub use kernel::{GaussianKernel, KernelConfig};
pub use register::{lddmm_register, registration_energy, RegisterOptions, Registration, VariationalWeights};
pub use shoot::{
    central_diff, central_diff_var, epdiff_shoot, epdiff_shoot_var, svf_displacement_var, svf_exp, svf_exp_var,
    IntegratorConfig, Scheme, Shot, Trajectory,
};
pub use warp::{compose, identity_map, warp, warp_backward, warp_var, Boundary};

/// `[2, H, W]` velocity in pixels per unit time.
pub type VelocityField = crate::tensor::Tensor;
/// `[2, H, W]` momentum, dual to velocity through `K`.
pub type MomentumField = crate::tensor::Tensor;
/// `[2, H, W]` absolute sampling coordinates.
pub type DeformationField = crate::tensor::Tensor;
