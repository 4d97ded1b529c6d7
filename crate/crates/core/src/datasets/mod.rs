//! Dataset files and the synthetic furniture generator with its attribute oracles.

pub mod attributes;
pub mod cloud_io;
pub mod manifest;
pub mod oracle;
pub mod synthetic;

pub use attributes::{
    caption_from_attributes, full_caption, Mentions, ShapeAttributes, ShapeClass,
};
pub use cloud_io::{load_cloud, save_cloud};
pub use manifest::{caption_id, load_manifest, save_manifest, DatasetManifest, ShapeRecord, Split};
pub use oracle::{filter_unambiguous, AttributeOracle};
pub use synthetic::{generate_synthetic, SyntheticConfig};
