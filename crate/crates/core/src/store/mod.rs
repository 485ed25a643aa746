//! On-disk bundle format: NPY arrays plus a JSON manifest.

mod array;
mod bundle;
pub mod npy;

pub use array::{Array, ArrayF32, ArrayF64};
pub use bundle::{
    load_bundle, ClassifierHead, EmbeddingBundle, EmbeddingSet, FeatureFiles, HeadFiles,
    Manifest, OodFiles, OodGroup, OodSet, TrainFiles, MANIFEST_VERSION,
};
pub use npy::{read_npy, read_npy_f64, write_npy, write_npy_f64};
