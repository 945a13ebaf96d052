//! The generator, discriminator and semantic evaluator, plus checkpoints.

pub mod checkpoint;
mod discriminator;
mod generator;
pub mod layers;
mod semantic;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Model, ModelKind,
};
pub use discriminator::{accuracy, caption_input, Discriminator, DiscriminatorConfig};
pub use generator::{DecodeState, EncodedClip, Generator, GeneratorConfig};
pub use semantic::{cosine_of_unit, SemanticConfig, SemanticEvaluator};
