//! Frozen hierarchical encoder, tunable mask decoder and their on-disk
//! container.

mod config;
pub mod container;
mod decoder;
mod encoder;

pub use config::EncoderConfig;
pub use container::{load_pretrained_encoder, save_encoder, Precision, FORMAT_VERSION};
pub use decoder::{DecoderConfig, MaskDecoder, MaskLogits, TransposedConv};
pub use encoder::{Block, Encoder, StageFeatures};
