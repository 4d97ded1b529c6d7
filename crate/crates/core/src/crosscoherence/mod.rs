//! The coherence metric: bilateral cross-attention scorer and its training.

pub mod attention;
pub mod model;
pub mod train;

pub use attention::{cross_attention, cross_attention_with_weights, AttentionConfig};
pub use model::{bilateral_block, CrossCoherenceModel, GroupScore, ScorerConfig, ShapeInput};
pub use train::{
    batch_loss, fit, pairwise_accuracy, train_step, FitConfig, FitOutput, RunMetadata, ShapeSource,
    TrainGroup,
};
