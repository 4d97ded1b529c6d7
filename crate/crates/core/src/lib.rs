//! Text-to-shape coherence scoring for colored point clouds.
//!
//! The crate covers the whole pipeline. Point clouds are encoded by PointNet++
//! set abstraction and scored against captions by a bilateral cross-attention
//! model. Around it sit distractor mining in autoencoder latent space, the
//! pairwise and R-precision protocols, dataset formats with a synthetic
//! furniture generator, and caption refinement through a completion provider.

pub mod autodiff;
pub mod crosscoherence;
pub mod datasets;
pub mod distractors;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod protocols;
pub mod refine;

pub use crosscoherence::{CrossCoherenceModel, FitConfig, GroupScore, ScorerConfig, ShapeInput};
pub use datasets::{DatasetManifest, ShapeAttributes, Split};
pub use distractors::{DistractorSet, Triplet};
pub use encoders::{EncoderConfig, LatentCode, LocalFeatureSet, TextItem, TextProvider};
pub use error::{Error, Result};
pub use geometry::{ColoredPointCloud, Point3};
pub use nn::ParamStore;
pub use protocols::{EvalReport, Scorer, DEFAULT_SET_SIZE};
