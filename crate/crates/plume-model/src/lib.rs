//! The surrogate models: a low-resolution temporal predictor (TM), a 4x
//! spatial refinement U-Net (SRM), the high-resolution temporal baseline
//! (HRTM), and the autoregressive rollout engine with observational
//! updates.

pub mod hrtm;
pub mod rollout;
pub mod sources;
pub mod srm;
pub mod temporal_unet;
pub mod tm;

pub use hrtm::{HrtmModel, HRTMConfig};
pub use rollout::{rollout, FrameProvenance, RolloutPlan, RolloutResult, SingleStepModel};
pub use sources::{PoolPairSource, WindowSource};
pub use srm::{RefinementModel, SRMConfig};
pub use temporal_unet::{BottleneckKind, BuildReport, SkipMode};
pub use tm::{TemporalModel, TMConfig};
