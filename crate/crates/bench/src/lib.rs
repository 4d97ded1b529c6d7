//! Seeded fixtures shared by the kernel benchmarks.

use std::sync::Arc;

use crosscoherence::crosscoherence::AttentionConfig;
use crosscoherence::encoders::{BuiltinTextConfig, BuiltinTextEncoder, Vocabulary};
use crosscoherence::{ColoredPointCloud, CrossCoherenceModel, EncoderConfig, Point3, ScorerConfig, ShapeInput, TextItem, TextProvider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CAPTION: &str = "a red chair with four wooden legs and a tall solid back";

/// `n` points drawn uniformly from the unit cube.
pub fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

pub fn random_cloud(n: usize, seed: u64) -> ColoredPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ColoredPointCloud {
        points: random_points(n, seed),
        colors: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
    }
}

/// Untrained desk-sized scorer with a trainable built-in text encoder.
pub fn desk_model(seed: u64) -> CrossCoherenceModel {
    let encoder = EncoderConfig::desk();
    let vocab = Vocabulary::build([CAPTION]);
    let text = TextProvider::Builtin(BuiltinTextEncoder {
        vocab,
        config: BuiltinTextConfig { dim: 32, heads: 4 },
        frozen: false,
    });
    let config = ScorerConfig {
        attention: AttentionConfig { d_model: 32, heads: 4, use_residual_norm: true },
        depth: 2,
        head_widths: vec![64, 32],
        shape_dim: encoder.local_width(),
        region_positions: true,
        shape_hidden: vec![64],
        text_dim: 32,
        zero_init_head: false,
        freeze_encoder: true,
    };
    CrossCoherenceModel::new(config, encoder, text, None, seed).expect("desk model")
}

/// Cached local features of a random cloud, as used during frozen-encoder training.
pub fn feature_input(model: &CrossCoherenceModel, n: usize, seed: u64) -> ShapeInput {
    let features = model.local_features(&random_cloud(n, seed)).expect("features");
    ShapeInput::Features(Arc::new(features))
}

pub fn caption() -> TextItem {
    TextItem::new("bench", CAPTION)
}
