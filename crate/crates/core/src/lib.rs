//! Group membership prediction: decide whether a tuple of entities observed
//! in different views (cameras, family roles) share one semantic label.
//!
//! The pipeline quantizes dense local features into per-view visual words,
//! encodes each entity as a sparse word-by-location appearance map using a
//! truncated exponential kernel over chessboard distances, and scores tuples
//! with bilinear classifiers over the implicit cross-view co-occurrence
//! tensor. Multi-view scores are decomposed into a weighted sum of two-view
//! scores whose parameters are learned by alternating hinge-loss SVM solves.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `F64`
//! aliases below are what the command-line pipeline uses.

mod bytes;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod scalar;
pub mod scoring;
pub mod solver;
pub mod synthgen;
pub mod training;
pub mod vocab;

pub use error::{GmpError, Result};
pub use scalar::Scalar;

pub type AppearanceMapF64 = encoding::AppearanceMap<f64>;
pub type AppearanceMapF32 = encoding::AppearanceMap<f32>;
pub type KernelParamsF64 = encoding::KernelParams<f64>;
pub type BilinearModelF64 = scoring::BilinearModel<f64>;
pub type BilinearModelF32 = scoring::BilinearModel<f32>;
pub type PairWeightsF64 = scoring::PairWeights<f64>;
pub type SharedWeightsF64 = scoring::SharedWeights<f64>;
pub type SvmProblemF64 = solver::SvmProblem<f64>;
pub type TrainingRunF64 = training::TrainingRun<f64>;
