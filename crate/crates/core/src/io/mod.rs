//! Bit-exact binary tensor/checkpoint formats, dataset manifests, and the
//! synthetic dataset generator.

pub mod checkpoint;
pub mod dataset;
pub mod tensor_file;

pub use checkpoint::{load_params, save_params};
pub use dataset::{
    generate_synthetic, load_dataset, read_manifest, split_indices, DatasetManifest, LoadedDataset,
    SyntheticTask,
};
pub use tensor_file::{atomic_write, read_tensor, write_tensor, DType};
