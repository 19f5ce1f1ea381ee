//! MNIST-family ingestion and colored multi-domain environments.

mod batch;
mod colored;
pub mod idx;

pub use batch::{batch_indices, batch_iterator};
pub use colored::{
    build_colored_environment, load_semantic_shift_set, EnvironmentSpec, LabelMode, LabeledExample, Role,
    COLOR_CHANNELS, OUT_OF_VOCABULARY,
};
pub use idx::{parse_idx, write_idx, IdxArray, RawImageSet, Split};
