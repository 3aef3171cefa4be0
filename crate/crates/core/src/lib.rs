//! Multi-dataset medical image segmentation.
//!
//! A U-shaped network whose encoder and decoder blocks are wrapped in
//! similarity fusion blocks, trained on several partially annotated datasets
//! at once through a shared one-hot label space with per-class sigmoid heads.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod label_space;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use fusion::{FusionConfig, FusionVariant};
pub use label_space::LabelSpace;
pub use loss::LossConfig;
pub use network::NetworkConfig;
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use volume::{LabelVolume, Volume};
