//! A small f64 convolutional network engine with explicit backward passes.

mod adam;
mod blocks;
mod layers;
pub mod ops;
mod weights;
mod zoo;

pub use adam::{Adam, AdamConfig};
pub use blocks::{Concat, Residual, Sequential};
pub use layers::{AvgPool2d, BatchNorm2d, Conv2d, Dense, Dropout, GlobalAvgPool, Layer, MaxPool2d, Mode, Param, Relu};
pub use ops::{conv_forward, global_avg_pool, max_pool, relu, softmax, Activation, Window};
pub use weights::{
    checkpoint_name, export_instructions, load_checkpoint, load_tensors, pretrained_path, read_checkpoint_meta,
    save_checkpoint, save_tensors, CheckpointMeta,
};
pub use zoo::{build_model, stack_images, Model, ModelConfig, DEFAULT_DROPOUT, HEAD_PREFIX, NUM_CLASSES};
