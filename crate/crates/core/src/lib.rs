//! Online adaptation of a category detector from an ensemble of instance
//! trackers bootstrapped by a high-precision, low-recall oracle.
//!
//! The pipeline reads a stream of frames, each holding candidate windows
//! with feature vectors. Oracle seeds spawn per-instance logistic detectors
//! that track their object, harvest positives and hard negatives, tune their
//! own step sizes, and are pulled toward a shared mean. That mean, a running
//! average over every instance snapshot, is the adapted category detector.

pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod mtl;
pub mod oracle;
pub mod persist;
pub mod selftune;
pub mod stream;
pub mod tracker;

pub use engine::{Engine, EngineConfig, EvalSplit, Mode, RunReport};
pub use error::{Error, Result};
pub use geometry::{BoundingBox, CandidateWindow};
pub use model::{FeatureVector, LabeledSample, ParamVector};
pub use mtl::{CategoryModel, Hyperparams, InstanceModel};
pub use persist::ModelFile;
