//! Multi-instance sketch video colorization on a small diffusion transformer.
//!
//! A clip is encoded by an exactly invertible space-to-depth codec. Reference
//! instances are pasted onto a canvas that becomes the first frame of a
//! condition stream, their latent tokens join the sequence under a block
//! attention mask, and background, instance and text features reach the
//! backbone through separately weighted cross-attention experts.

pub mod attention;
pub mod backbone;
pub mod canvas;
pub mod checkpoint;
pub mod codec;
pub mod control;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod schedule;
pub mod train;

pub use canvas::{compose, CanvasSpec, InstanceImage, InstanceSet, Placement};
pub use checkpoint::Checkpoint;
pub use codec::{Frame, LatentVideo, PixelVideo, SpaceToDepth};
pub use control::WeightOverrides;
pub use error::{Error, Result};
pub use model::{Ablation, ColorizationModel, ConditionInputs, ModelConfig, SampleOptions};
pub use train::{train, TrainConfig};
