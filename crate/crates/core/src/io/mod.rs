//! Run configuration and checkpoint files.

mod checkpoint;
mod config;

pub use checkpoint::{
    blob_path, decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint, Manifest,
    TensorEntry,
};
pub use config::{DataConfig, DataSource, RunConfig, TlaSettings};
