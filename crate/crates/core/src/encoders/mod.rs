//! Point-cloud and text encoders. The reconstruction autoencoder and the
//! binary checkpoint format live here too.

pub mod autoencoder;
pub mod checkpoint;
pub mod pointnet;
pub mod text;

pub use autoencoder::{
    decode_cloud, train_autoencoder, AutoencoderConfig, AutoencoderRun, DecoderConfig,
    ReconstructionLoss,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pointnet::{
    encode_global, encode_local, prepare_cloud, set_abstraction, EncoderConfig, LatentCode,
    LocalFeatureSet, SetAbstractionConfig,
};
pub use text::{
    embed_text, tokenize, BuiltinTextConfig, BuiltinTextEncoder, FileEmbeddings,
    TextEmbeddingSequence, TextItem, TextProvider, Vocabulary,
};
