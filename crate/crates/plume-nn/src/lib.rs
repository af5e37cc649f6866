//! Minimal deterministic CPU training stack for the plume surrogates.
//!
//! Provides exactly the layers the models need (3D convolution, transposed
//! 3D convolution, batch norm with fused activation, max pooling, channel
//! dropout, a convolutional LSTM cell), an Adam optimizer with global-norm
//! clipping, a reduce-on-plateau scheduler, a training loop with
//! best-checkpoint tracking and resume, and a self-describing checkpoint
//! container.
//!
//! Convolutions run as tiled im2col + GEMM (`matrixmultiply`), parallelized
//! over fixed job chunks so results are bit-reproducible for a given thread
//! count. Transposed convolutions are decomposed into per-phase stride-1
//! convolutions, which avoids both scatter-adds and zero-dilation waste.

pub mod adam;
pub mod conv;
pub mod convlstm;
pub mod error;
pub mod layers;
pub mod param;
pub mod scheduler;
pub mod trainer;

pub mod checkpoint;

pub use adam::{clip_global_norm, Adam};
pub use error::NnError;
pub use layers::{Activation, BatchNorm3d, Conv3d, ConvTranspose3d, Dropout3d, MaxPool3d};
pub use param::Param;
pub use scheduler::ReduceLrOnPlateau;
pub use trainer::{BatchModel, BatchSource, EpochRecord, Hyper, Trainer};
