//! Deep multi-instance learning for whole-image classification.
//!
//! An image is treated as a bag of patches. A small convolutional backbone
//! maps the image to a feature map whose spatial positions are the patches;
//! a logistic regression shared across positions turns every feature vector
//! into a patch probability, and the bag is scored from the ranked patch
//! probabilities. Three bag objectives are provided:
//!
//! - [`LossScheme::MaxPool`]: the bag probability is the largest patch
//!   probability.
//! - [`LossScheme::LabelAssign`]: the top `k` ranked patches inherit the bag
//!   label and the rest are treated as negatives.
//! - [`LossScheme::Sparse`]: the max-pooling term plus an L1 penalty on all
//!   patch probabilities.
//!
//! Everything here is pure computation (`no_std` + `alloc`): the tape-based
//! autodiff in [`graph`], the [`backbone`] and MIL [`head`], image
//! [`preprocess`]ing, synthetic data and fold splitting in [`dataset`], the
//! [`optim`]izer, [`metrics`] and the [`train`]ing driver. File formats and
//! the command-line tool live in the `deepmil-cli` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod backbone;
pub mod dataset;
mod error;
pub mod graph;
pub mod head;
pub mod heatmap;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod preprocess;
mod scalar;
pub mod tensor;
pub mod train;

pub use backbone::{BackboneConfig, Layer, Preset};
pub use dataset::{FoldSplit, MassBox, Sample};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use head::{LossScheme, MilHyperparams, PROB_EPSILON};
pub use image::GrayImage;
pub use params::ModelParams;
pub use preprocess::AugmentConfig;
pub use scalar::Real;
pub use tensor::Tensor;
pub use train::{EvalReport, TrainConfig};
