//! Training, checkpointing, evaluation, and attention export.

mod checkpoint;
mod config;
mod export;
mod infer;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AdamConfig, RunConfig};
pub use export::{attention_maps, encode_pgm, encode_ppm, export_attention, normalize_to_u8, AttentionMap};
pub use infer::{detections, evaluate, predict_all, report_for};
pub use optim::{global_norm, Adam};
pub use train::{check_dataset, model_input, prepare, Prepared, StepLog, Trainer};
