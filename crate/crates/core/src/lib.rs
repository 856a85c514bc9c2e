//! Linear 3D morphable-model expression estimation.
//!
//! Faces are synthesized as `mean + S·alpha + E·eta`, where `eta` is the
//! expression coefficient vector (29 components by default). Two routes
//! recover `eta` from a picture of a face:
//!
//! - [`fitter`]: damped, box-constrained Gauss-Newton on 2D landmarks under a
//!   full perspective camera ([`projection`]).
//! - [`regressor`]: a small convolutional network applied directly to the
//!   preprocessed pixel intensities.
//!
//! [`datagen`] produces seeded synthetic identities, expressions, renders and
//! fitted labels; [`eval`] runs the emotion-classification protocol (per-clip
//! pooling, kNN with K=5, leave-one-clip-out, scale sweep) used to compare the
//! two routes. The [`cli`] module drives everything from the command line.

pub mod cli;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod fsutil;
pub mod image;
pub mod model;
pub mod obj;
pub mod projection;
pub mod regressor;
pub mod seed;
pub mod timing;

pub use error::{Error, Result};
pub use fitter::{fit_expression, FitResult, FitterConfig};
pub use model::{ExpressionCoeffs, MorphableModel, Shape3D, ShapeCoeffs};
pub use projection::{CameraIntrinsics, Landmarks2D, Pose6DoF, ProjectionMatrix};
