//! Manifests, samples, standardization, folds and synthetic data.

mod dataset;
mod folds;
mod manifest;
mod standardize;
pub mod synth;

pub use dataset::{Batch, Dataset, Sample};
pub use folds::{subject_folds, FoldSplit};
pub use manifest::{
    decode_tensor, encode_tensor, format_labels, parse_labels, write_dataset, DatasetManifest,
    ManifestRow, HEADER as MANIFEST_HEADER, MANIFEST_FILE,
};
pub use standardize::{zscore, ModalityStats, StandardizationStats, Standardize};
pub use synth::{synth_generate, synth_to_dir, SynthSpec};
