//! Airway segmentation toolkit.
//!
//! Covers the full pipeline for 2.5D airway segmentation of chest CT:
//! volume I/O ([`volio`]), intensity preprocessing and 2.5D slice extraction
//! ([`prep`]), a small reverse-mode tensor engine ([`tensorcore`]), the
//! MEDSeg network with a padded BiFPN ([`medsegnet`]), AdamW training
//! ([`train`]), volume inference and largest-component postprocessing
//! ([`inferpost`]), overlap and tree metrics ([`airmetrics`]) and synthetic
//! bifurcating phantoms with exact ground truth ([`phantom`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below name the common instantiations.

pub mod airmetrics;
pub mod inferpost;
pub mod medsegnet;
pub mod phantom;
pub mod prep;
pub mod scalar;
pub mod tensorcore;
pub mod train;
pub mod volio;

pub use scalar::Scalar;

pub type Tensor32 = tensorcore::Tensor<f32>;
pub type Tensor64 = tensorcore::Tensor<f64>;
pub type Graph32 = tensorcore::Graph<f32>;
pub type Graph64 = tensorcore::Graph<f64>;
pub type MedSeg32 = medsegnet::MedSegModel<f32>;
pub type MedSeg64 = medsegnet::MedSegModel<f64>;
