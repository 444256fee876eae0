//! Segmentation- and attribute-conditioned adversarial image synthesis.
//!
//! A generator maps a latent code, an attribute vector and a one-hot segmentation
//! map to an image. It is trained against a Wasserstein critic with gradient
//! penalty and an auxiliary attribute classifier, while a segmentor network pushes
//! generated images to respect the input map.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod interpolation;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use losses::{LossParts, LossReport, LossWeights, TermMask};
pub use networks::{ArchConfig, GeneratorOrder, ModelBundle};
pub use training::{SegmentorMode, TrainConfig, TrainHistory, Trainer};
pub use types::{AttributeLabel, ImageTensor, JointSample, LandmarkSet, LatentVector, SegmentationMap};
