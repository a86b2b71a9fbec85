//! Learnable registration blocks: the momentum predictor `Λ(t, g)`, the
//! shooting-warping net `Γ(m, g)` and their composition
//! `Φ(t, g) = Γ(Λ(t, g), g)`.

mod nets;
mod weights;

pub use nets::{
    gamma_forward, gamma_forward_var, lambda_forward, lambda_forward_var, phi_forward, phi_forward_var, GammaArch,
    LambdaArch, RegNet,
};
pub use weights::{ConvSpec, NetVars, NetWeights};
