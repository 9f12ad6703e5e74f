//! Synthetic two-frame scenes with analytic flow, and their on-disk format.

mod format;
mod scene;

pub use format::{
    decode_tensor, encode_tensor, read_dataset, read_manifest, read_tensor_file, write_dataset,
    write_tensor_file, Dataset, Manifest, SampleRecord, DATASET_FORMAT_VERSION, MANIFEST, TENSOR_MAGIC,
    TENSOR_VERSION,
};
pub use scene::{generate_sample, generate_samples, IntRange, SamplePair, SceneSpec};
