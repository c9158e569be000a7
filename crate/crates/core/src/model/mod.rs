//! Tiny Vision Transformer, its training loop and checkpoints.

mod checkpoint;
mod config;
mod train;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DatasetKind, MaskMode, ModelConfig, RunConfig};
pub use train::{
    evaluate, load_dataset, metrics_to_jsonl, steps_per_epoch, synth_spec_for, train, train_from, Dataset,
    EpochMetrics, TrainState,
};
pub use vit::{argmax, cross_entropy, patchify, Block, ForwardTrace, LossOutput, TinyViT};
