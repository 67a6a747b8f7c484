//! Temporal-consensus identification for 3D point-cloud streams.
//!
//! The pipeline turns a depth-frame stream into per-visit identities:
//! preprocessing ([`pointcloud`]), visit segmentation and ground-truth
//! alignment ([`stream`]), a permutation-invariant point-set classifier
//! ([`classifier`]), confidence-gated majority voting ([`consensus`]),
//! metrics ([`evaluation`]) and a pseudo-label re-calibration loop
//! ([`recalibration`]). [`synthdata`] generates seeded multi-day herds
//! with morphological drift for benchmarking.

pub mod classifier;
pub mod consensus;
pub mod dataset;
pub mod evaluation;
pub mod pointcloud;
pub mod recalibration;
pub mod scalar;
pub mod seed;
pub mod stream;
pub mod synthdata;

pub use scalar::Real;

/// The working cloud type of the pipeline; the numeric core is generic
/// over [`Real`], the pipeline pins `f64`.
pub type Cloud = pointcloud::PointCloud<f64>;
pub type CloudF32 = pointcloud::PointCloud<f32>;
pub type Model = classifier::ModelParams<f64>;
pub type Probs = classifier::ProbVector<f64>;
