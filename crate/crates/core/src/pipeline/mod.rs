//! The unrolled Douglas-Rachford network: stages `tᵏ⁺¹ = tᵏ − Φ(tᵏ) +
//! Ψ(2Φ(tᵏ) − tᵏ, y, ρₖ)`, its stage-weighted loss, training and the two
//! inference paths.

mod model;
mod stage;
mod train;

pub use model::{
    infer, pipeline_forward, run_pipeline, shoot_warp, Context, Inference, InferMode, Init, LossConfig, LossTerms, Model,
    PipelineConfig, StageParams, StageVars, RHO_PRESET_CT_LOWDOSE, RHO_PRESET_CT_SPARSE, RHO_PRESET_MRI,
};
pub use stage::{stage_forward, DRState, LearnedPhi, Passthrough, QuadraticProx, RegistrationMap};
pub use train::{evaluate_loss, train, Adam, AdamConfig, EpochRecord, History, TrainConfig, TrainReport, TrainingSample};

#[cfg(test)]
mod tests;
