//! Describing the differences between two near-identical images.
//!
//! The pipeline registers the pair, marks changed pixels, groups them into
//! difference clusters with DBSCAN and encodes both images as feature grids.
//! An attention LSTM writes one sentence per cluster; which cluster a
//! training sentence talks about is a latent variable with a learned
//! log-linear salience prior, summed out exactly during training.
//!
//! Model code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod clustering;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = training::Model<f64>;
pub type Model32 = training::Model<f32>;
pub type DecoderParams64 = decoder::DecoderParams<f64>;
pub type DecoderParams32 = decoder::DecoderParams<f32>;
pub type FeatureGridPair64 = encoder::FeatureGridPair<f64>;
pub type FeatureGridPair32 = encoder::FeatureGridPair<f32>;
pub type ProjectedMask64 = clustering::ProjectedMask<f64>;
pub type ProjectedMask32 = clustering::ProjectedMask<f32>;
pub type PreparedPair64 = pipeline::PreparedPair<f64>;
pub type PreparedPair32 = pipeline::PreparedPair<f32>;
pub type TrainingExample64 = training::TrainingExample<f64>;
pub type TrainingExample32 = training::TrainingExample<f32>;
